use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    /// Stroke-5 rows through a 5 → d affine projection.
    Continuous,
    /// Token ids through an embedding table.
    Tokenized { vocab_size: usize },
}

/// How the embedding is turned back into a full-length decoder memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpandMode {
    /// One affine map `d → max_len · d`, reshaped to rows.
    Affine,
    /// `z` copied to every row.
    Tile,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub mode: InputMode,
    pub d_model: usize,
    /// Layer count of both the encoder and the decoder stack.
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub n_classes: usize,
    pub expand: ExpandMode,
}

impl ModelConfig {
    pub fn tokenized(vocab_size: usize, max_len: usize, n_classes: usize) -> Self {
        ModelConfig {
            mode: InputMode::Tokenized { vocab_size },
            max_len,
            n_classes,
            ..Self::default_continuous()
        }
    }

    pub fn continuous(max_len: usize, n_classes: usize) -> Self {
        ModelConfig {
            max_len,
            n_classes,
            ..Self::default_continuous()
        }
    }

    fn default_continuous() -> Self {
        ModelConfig {
            mode: InputMode::Continuous,
            d_model: 128,
            n_layers: 4,
            n_heads: 8,
            d_ff: 512,
            max_len: 64,
            dropout: 0.1,
            n_classes: 1,
            expand: ExpandMode::Affine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_len < 2 {
            return bad(format!("max_len {} is too short", self.max_len));
        }
        if self.d_ff == 0 || self.n_classes == 0 {
            return bad("d_ff and n_classes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if let InputMode::Tokenized { vocab_size } = self.mode {
            if vocab_size <= crate::tokenize::NUM_SPECIAL {
                return bad(format!("vocabulary of {vocab_size} has no content tokens"));
            }
        }
        Ok(())
    }

    /// Attention scale `1/√(d_model / n_heads)`.
    pub fn alpha(&self) -> f64 {
        1.0 / ((self.d_model / self.n_heads) as f64).sqrt()
    }

    /// Width of the per-position reconstruction output.
    pub fn output_dim(&self) -> usize {
        match self.mode {
            InputMode::Tokenized { vocab_size } => vocab_size,
            InputMode::Continuous => 5,
        }
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![(
            "mode".to_string(),
            match self.mode {
                InputMode::Continuous => "continuous".to_string(),
                InputMode::Tokenized { .. } => "tokenized".to_string(),
            },
        )];
        if let InputMode::Tokenized { vocab_size } = self.mode {
            kv.push(("vocab_size".into(), vocab_size.to_string()));
        }
        kv.extend([
            ("d_model".to_string(), self.d_model.to_string()),
            ("n_layers".into(), self.n_layers.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("d_ff".into(), self.d_ff.to_string()),
            ("max_len".into(), self.max_len.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("n_classes".into(), self.n_classes.to_string()),
            (
                "expand".into(),
                match self.expand {
                    ExpandMode::Affine => "affine".into(),
                    ExpandMode::Tile => "tile".into(),
                },
            ),
        ]);
        kv
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::Config(format!("missing model key {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("model key {k} is not an integer")))
        };
        let mode = match get("mode")?.as_str() {
            "continuous" => InputMode::Continuous,
            "tokenized" => InputMode::Tokenized {
                vocab_size: num("vocab_size")?,
            },
            other => return Err(Error::Config(format!("unknown mode {other}"))),
        };
        let expand = match get("expand")?.as_str() {
            "affine" => ExpandMode::Affine,
            "tile" => ExpandMode::Tile,
            other => return Err(Error::Config(format!("unknown expand mode {other}"))),
        };
        let cfg = ModelConfig {
            mode,
            d_model: num("d_model")?,
            n_layers: num("n_layers")?,
            n_heads: num("n_heads")?,
            d_ff: num("d_ff")?,
            max_len: num("max_len")?,
            dropout: get("dropout")?
                .parse()
                .map_err(|_| Error::Config("dropout is not a number".into()))?,
            n_classes: num("n_classes")?,
            expand,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
