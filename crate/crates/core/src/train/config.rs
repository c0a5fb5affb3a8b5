use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ExpandMode, InputMode, ModelConfig};

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
        }
    }
    Ok(out)
}

fn take<T: FromStr>(kv: &mut BTreeMap<String, String>, key: &str, slot: &mut T) -> Result<()> {
    if let Some(raw) = kv.remove(key) {
        *slot = raw
            .parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub lambda_cls: f64,
    pub base_lr: f64,
    pub warmup: u64,
    pub seed: u64,
    pub shuffle_strokes: bool,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            steps: 2000,
            lambda_cls: 1.0,
            base_lr: 1e-3,
            warmup: 200,
            seed: 0,
            shuffle_strokes: false,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.warmup == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size, warmup and log_every must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.base_lr)));
        }
        if !(self.lambda_cls >= 0.0 && self.lambda_cls.is_finite()) {
            return Err(Error::Config(format!("lambda_cls {} is invalid", self.lambda_cls)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("batch_size".into(), self.batch_size.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("lambda_cls".into(), self.lambda_cls.to_string()),
            ("base_lr".into(), self.base_lr.to_string()),
            ("warmup".into(), self.warmup.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("shuffle_strokes".into(), self.shuffle_strokes.to_string()),
            ("log_every".into(), self.log_every.to_string()),
        ]
    }

    /// Fills from `kv`, removing the keys it understands.
    pub fn take_from(kv: &mut BTreeMap<String, String>) -> Result<Self> {
        let mut c = TrainConfig::default();
        take(kv, "batch_size", &mut c.batch_size)?;
        take(kv, "steps", &mut c.steps)?;
        take(kv, "lambda_cls", &mut c.lambda_cls)?;
        take(kv, "base_lr", &mut c.base_lr)?;
        take(kv, "warmup", &mut c.warmup)?;
        take(kv, "seed", &mut c.seed)?;
        take(kv, "shuffle_strokes", &mut c.shuffle_strokes)?;
        take(kv, "log_every", &mut c.log_every)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut kv = kv.clone();
        let c = Self::take_from(&mut kv)?;
        match kv.keys().next() {
            Some(k) => Err(Error::Config(format!("unknown training key {k}"))),
            None => Ok(c),
        }
    }
}

/// Model hyperparameters that do not depend on the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub expand: ExpandMode,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::continuous(96, 1);
        ModelShape {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            max_len: c.max_len,
            dropout: c.dropout,
            expand: c.expand,
        }
    }
}

impl ModelShape {
    pub fn config(&self, mode: InputMode, n_classes: usize) -> ModelConfig {
        ModelConfig {
            mode,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
            dropout: self.dropout,
            n_classes,
            expand: self.expand,
        }
    }

    pub fn take_from(kv: &mut BTreeMap<String, String>) -> Result<Self> {
        let mut s = ModelShape::default();
        take(kv, "d_model", &mut s.d_model)?;
        take(kv, "n_layers", &mut s.n_layers)?;
        take(kv, "n_heads", &mut s.n_heads)?;
        take(kv, "d_ff", &mut s.d_ff)?;
        take(kv, "max_len", &mut s.max_len)?;
        take(kv, "dropout", &mut s.dropout)?;
        if let Some(e) = kv.remove("expand") {
            s.expand = match e.as_str() {
                "affine" => ExpandMode::Affine,
                "tile" => ExpandMode::Tile,
                other => return Err(Error::Config(format!("expand: unknown mode {other}"))),
            };
        }
        Ok(s)
    }
}

/// A whole training configuration file.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelShape,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = parse_kv(text)?;
        let train = TrainConfig::take_from(&mut kv)?;
        let model = ModelShape::take_from(&mut kv)?;
        if let Some(k) = kv.keys().next() {
            return Err(Error::Config(format!("unknown configuration key {k}")));
        }
        Ok(RunConfig { train, model })
    }
}
