//! Flat `key = value` training configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::OptimizerKind;
use crate::quantizer::{DEFAULT_K, DEFAULT_TAU, MAX_K};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(Error::InvalidArgument(format!(
                "precision must be f32 or f64, got '{s}'"
            ))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Per-epoch learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate toward zero over the run.
    Cosine,
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::InvalidArgument(format!(
                "lr_schedule must be constant or cosine, got '{s}'"
            ))),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub k: usize,
    pub tau: f64,
    pub dataset_path: PathBuf,
    pub align_weight: f64,
    pub p_drop_style: f64,
    pub p_drop_content: f64,
    pub precision: Precision,
}

pub const KEYS: [&str; 14] = [
    "stage",
    "epochs",
    "batch_size",
    "learning_rate",
    "lr_schedule",
    "optimizer",
    "seed",
    "k",
    "tau",
    "dataset_path",
    "align_weight",
    "p_drop_style",
    "p_drop_content",
    "precision",
];

impl TrainConfig {
    /// Defaults for a stage: Adam at 1e-3, with cosine decay in stage 2.
    pub fn for_stage(stage: u8) -> Self {
        TrainConfig {
            stage,
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            lr_schedule: if stage == 1 {
                LrSchedule::Constant
            } else {
                LrSchedule::Cosine
            },
            optimizer: OptimizerKind::Adam,
            seed: 0,
            k: DEFAULT_K,
            tau: DEFAULT_TAU,
            dataset_path: PathBuf::from("data"),
            align_weight: 1.0,
            p_drop_style: 0.1,
            p_drop_content: 0.1,
            precision: Precision::F32,
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys not present
    /// keep the defaults of the configured stage.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(Error::Config {
                    line: i + 1,
                    message: format!("unknown key '{key}' (valid: {})", KEYS.join(", ")),
                });
            }
            if pairs
                .insert(key.to_string(), (i + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::Config {
                    line: i + 1,
                    message: format!("duplicate key '{key}'"),
                });
            }
        }
        let stage = match pairs.get("stage") {
            Some((line, v)) => v.parse::<u8>().map_err(|e| Error::Config {
                line: *line,
                message: format!("stage: {e}"),
            })?,
            None => 1,
        };
        let mut cfg = TrainConfig::for_stage(stage);
        for (key, (line, value)) in &pairs {
            cfg.set(key, value).map_err(|e| Error::Config {
                line: *line,
                message: e.to_string(),
            })?;
        }
        cfg.validate().map_err(|e| Error::Config {
            line: 0,
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>()
                .map_err(|e| Error::InvalidArgument(format!("{key}: cannot parse '{v}': {e}")))
        }
        match key {
            "stage" => self.stage = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "lr_schedule" => self.lr_schedule = value.parse()?,
            "optimizer" => self.optimizer = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "dataset_path" => self.dataset_path = PathBuf::from(value),
            "align_weight" => self.align_weight = num(key, value)?,
            "p_drop_style" => self.p_drop_style = num(key, value)?,
            "p_drop_content" => self.p_drop_content = num(key, value)?,
            "precision" => self.precision = value.parse()?,
            _ => return Err(Error::InvalidArgument(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.stage != 1 && self.stage != 2 {
            return bad(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.k == 0 || self.k > MAX_K {
            return bad(format!("k must lie in 1..={MAX_K}, got {}", self.k));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.align_weight > 0.0 && self.align_weight.is_finite()) {
            return bad(format!(
                "align_weight must be positive, got {}",
                self.align_weight
            ));
        }
        for (name, p) in [
            ("p_drop_style", self.p_drop_style),
            ("p_drop_content", self.p_drop_content),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        if self.stage == 2 && self.optimizer == OptimizerKind::Lloyd {
            return bad("the lloyd optimizer only applies to stage 1".into());
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let v = match key {
                "stage" => self.stage.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "learning_rate" => format!("{:?}", self.learning_rate),
                "lr_schedule" => self.lr_schedule.to_string(),
                "optimizer" => self.optimizer.to_string(),
                "seed" => self.seed.to_string(),
                "k" => self.k.to_string(),
                "tau" => format!("{:?}", self.tau),
                "dataset_path" => self.dataset_path.display().to_string(),
                "align_weight" => format!("{:?}", self.align_weight),
                "p_drop_style" => format!("{:?}", self.p_drop_style),
                "p_drop_content" => format!("{:?}", self.p_drop_content),
                "precision" => self.precision.to_string(),
                _ => unreachable!(),
            };
            s.push_str(&format!("{key} = {v}\n"));
        }
        s
    }

    /// Learning rate for a zero-based epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let progress = epoch.min(self.epochs) as f64 / self.epochs as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
