//! Run configuration: a flat `key = value` file whose keys double as
//! command-line flags.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dml::DmlConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::gp::{HeadKind, SurvivalDenominator, DEFAULT_MAX_EXACT_N, DEFAULT_NUM_INDUCING};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainMode {
    None,
    Dml,
}

impl FromStr for PretrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PretrainMode::None),
            "dml" => Ok(PretrainMode::Dml),
            other => Err(Error::Config(format!("unknown pretrain mode {other:?} (expected none|dml)"))),
        }
    }
}

impl std::fmt::Display for PretrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PretrainMode::None => "none",
            PretrainMode::Dml => "dml",
        })
    }
}

fn parse_denominator(s: &str) -> Result<SurvivalDenominator> {
    match s {
        "variance_sum" => Ok(SurvivalDenominator::VarianceSum),
        "sd_sum" => Ok(SurvivalDenominator::SdSum),
        other => Err(Error::Config(format!(
            "unknown survival_denominator {other:?} (expected variance_sum|sd_sum)"
        ))),
    }
}

fn denominator_name(d: SurvivalDenominator) -> &'static str {
    match d {
        SurvivalDenominator::VarianceSum => "variance_sum",
        SurvivalDenominator::SdSum => "sd_sum",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub head: HeadKind,
    pub n_sta_repr: usize,
    pub n_seq_emb: usize,
    pub n_seq_repr: usize,
    pub num_inducing: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Ignored by the exact head, which always uses the full training set.
    pub batch_size: usize,
    pub seed: u64,
    pub pretrain: PretrainMode,
    pub dml_bins: usize,
    pub dml_margin: f64,
    pub dml_patience: usize,
    pub dml_max_epochs: usize,
    pub dml_batch_size: usize,
    pub dml_learning_rate: f64,
    pub dropout_rate: f64,
    pub survival_denominator: SurvivalDenominator,
    pub max_exact_n: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dml = DmlConfig::default();
        RunConfig {
            head: HeadKind::Ppgp,
            n_sta_repr: 4,
            n_seq_emb: 16,
            n_seq_repr: 32,
            num_inducing: DEFAULT_NUM_INDUCING,
            learning_rate: 0.01,
            epochs: 50,
            batch_size: 128,
            seed: 0,
            pretrain: PretrainMode::None,
            dml_bins: dml.bins,
            dml_margin: dml.margin,
            dml_patience: dml.patience,
            dml_max_epochs: dml.max_epochs,
            dml_batch_size: dml.batch_size,
            dml_learning_rate: dml.learning_rate,
            dropout_rate: 0.0,
            survival_denominator: SurvivalDenominator::VarianceSum,
            max_exact_n: DEFAULT_MAX_EXACT_N,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    /// Every recognized key, in file order.
    pub const KEYS: [&'static str; 19] = [
        "head",
        "n_sta_repr",
        "n_seq_emb",
        "n_seq_repr",
        "num_inducing",
        "learning_rate",
        "epochs",
        "batch_size",
        "seed",
        "pretrain",
        "dml_bins",
        "dml_margin",
        "dml_patience",
        "dml_max_epochs",
        "dml_batch_size",
        "dml_learning_rate",
        "dropout_rate",
        "survival_denominator",
        "max_exact_n",
    ];

    /// Set one key from its text form. Hyphens in `key` are read as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "head" => self.head = value.parse()?,
            "n_sta_repr" => self.n_sta_repr = parse(&key, value)?,
            "n_seq_emb" => self.n_seq_emb = parse(&key, value)?,
            "n_seq_repr" => self.n_seq_repr = parse(&key, value)?,
            "num_inducing" => self.num_inducing = parse(&key, value)?,
            "learning_rate" => self.learning_rate = parse(&key, value)?,
            "epochs" => self.epochs = parse(&key, value)?,
            "batch_size" => self.batch_size = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "pretrain" => self.pretrain = value.parse()?,
            "dml_bins" => self.dml_bins = parse(&key, value)?,
            "dml_margin" => self.dml_margin = parse(&key, value)?,
            "dml_patience" => self.dml_patience = parse(&key, value)?,
            "dml_max_epochs" => self.dml_max_epochs = parse(&key, value)?,
            "dml_batch_size" => self.dml_batch_size = parse(&key, value)?,
            "dml_learning_rate" => self.dml_learning_rate = parse(&key, value)?,
            "dropout_rate" => self.dropout_rate = parse(&key, value)?,
            "survival_denominator" => self.survival_denominator = parse_denominator(value)?,
            "max_exact_n" => self.max_exact_n = parse(&key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key.replace('-', "_").as_str() {
            "head" => self.head.to_string(),
            "n_sta_repr" => self.n_sta_repr.to_string(),
            "n_seq_emb" => self.n_seq_emb.to_string(),
            "n_seq_repr" => self.n_seq_repr.to_string(),
            "num_inducing" => self.num_inducing.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "pretrain" => self.pretrain.to_string(),
            "dml_bins" => self.dml_bins.to_string(),
            "dml_margin" => self.dml_margin.to_string(),
            "dml_patience" => self.dml_patience.to_string(),
            "dml_max_epochs" => self.dml_max_epochs.to_string(),
            "dml_batch_size" => self.dml_batch_size.to_string(),
            "dml_learning_rate" => self.dml_learning_rate.to_string(),
            "dropout_rate" => self.dropout_rate.to_string(),
            "survival_denominator" => denominator_name(self.survival_denominator).to_string(),
            "max_exact_n" => self.max_exact_n.to_string(),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        })
    }

    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            cfg.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse_str(&text)
    }

    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_sta_repr", self.n_sta_repr),
            ("n_seq_emb", self.n_seq_emb),
            ("n_seq_repr", self.n_seq_repr),
            ("num_inducing", self.num_inducing),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("dml_max_epochs", self.dml_max_epochs),
            ("max_exact_n", self.max_exact_n),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.dml_bins < 2 || self.dml_batch_size < 2 {
            return Err(Error::Config("dml_bins and dml_batch_size must be at least 2".into()));
        }
        for (k, v) in [
            ("learning_rate", self.learning_rate),
            ("dml_learning_rate", self.dml_learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if !(self.dml_margin >= 0.0) {
            return Err(Error::Config(format!("dml_margin must be >= 0, got {}", self.dml_margin)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate must be in [0,1), got {}", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn encoder(&self, n_sta: usize, n_seq: usize) -> EncoderConfig {
        EncoderConfig {
            n_sta,
            n_seq,
            n_sta_repr: self.n_sta_repr,
            n_seq_emb: self.n_seq_emb,
            n_seq_repr: self.n_seq_repr,
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn dml(&self) -> DmlConfig {
        DmlConfig {
            bins: self.dml_bins,
            margin: self.dml_margin,
            batch_size: self.dml_batch_size,
            patience: self.dml_patience,
            max_epochs: self.dml_max_epochs,
            learning_rate: self.dml_learning_rate,
        }
    }
}
