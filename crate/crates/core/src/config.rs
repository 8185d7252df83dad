//! Run configuration and the flat `key = value` file format.
//!
//! Keys use dotted namespaces (`net.depth`, `distill.temperature`). Lines
//! starting with `#` and blank lines are ignored. Unknown keys are rejected
//! with the list of valid keys.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::criticality::PathStrategy;
use crate::distill::{DistillConfig, HmsdMode};
use crate::error::{CcsdError, Result};
use crate::ssnet::{Carrier, NetConfig};
use crate::synth::{default_contrast_table, PhantomConfig, N_REGIONS};

/// Environment variable overriding `seed`.
pub const SEED_ENV: &str = "CCSD_SEED";

/// Every recognised key, in file order.
pub const KEYS: &[&str] = &[
    "seed",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.lr_min",
    "train.eval_every",
    "train.augment",
    "train.path_strategy",
    "net.n_modalities",
    "net.spatial_rank",
    "net.input_size",
    "net.base_channels",
    "net.depth",
    "net.n_classes",
    "net.feature_channels",
    "distill.temperature",
    "distill.hmsd_weight",
    "distill.dmcd_weight",
    "distill.carrier",
    "distill.hmsd_mode",
    "data.n_cases",
    "data.seed",
    "data.noise_std",
    "data.texture_std",
    "data.contrast",
    "data.split",
];

/// Everything a training run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Drives initialization, shuffling, augmentation, level sampling and random paths.
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    /// Validate every this many epochs (the last epoch is always validated).
    pub eval_every: usize,
    pub augment: bool,
    pub path_strategy: PathStrategy,
    pub net: NetConfig,
    pub distill: DistillConfig,
    /// Dataset-level knobs. `n_modalities` and `volume_size` follow `net`.
    pub n_cases: usize,
    pub data_seed: u64,
    pub noise_std: f64,
    pub texture_std: f64,
    pub contrast_table: Vec<[f64; N_REGIONS]>,
    /// Train, validation and test fractions.
    pub split: (f64, f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        let data = PhantomConfig::default();
        Self {
            seed: 1,
            epochs: 30,
            batch_size: 4,
            lr: 1e-2,
            lr_min: 1e-5,
            eval_every: 5,
            augment: true,
            path_strategy: PathStrategy::MaxCriticality,
            net: NetConfig::default(),
            distill: DistillConfig::default(),
            n_cases: data.n_cases,
            data_seed: data.seed,
            noise_std: data.noise_std,
            texture_std: data.texture_std,
            contrast_table: data.contrast_table,
            split: (0.64, 0.16, 0.20),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| CcsdError::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>>
where
    V::Err: Display,
{
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join<V: Display>(items: &[V]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn as_config(key: &str) -> impl Fn(CcsdError) -> CcsdError + '_ {
    move |e| match e {
        CcsdError::InvalidArgument(m) => CcsdError::Config(format!("{key}: {m}")),
        other => other,
    }
}

impl TrainConfig {
    /// Defaults with `n_modalities` changed and the contrast table resized to match.
    pub fn with_modalities(n: usize) -> Self {
        let mut cfg = Self::default();
        cfg.net.n_modalities = n;
        cfg.contrast_table = default_contrast_table(n);
        cfg
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.lr_min" => self.lr_min = parse(key, v)?,
            "train.eval_every" => self.eval_every = parse(key, v)?,
            "train.augment" => self.augment = parse(key, v)?,
            "train.path_strategy" => self.path_strategy = PathStrategy::parse(v).map_err(as_config(key))?,
            "net.n_modalities" => {
                let n: usize = parse(key, v)?;
                if n != self.net.n_modalities {
                    self.contrast_table = default_contrast_table(n);
                }
                self.net.n_modalities = n;
            }
            "net.spatial_rank" => self.net.spatial_rank = parse(key, v)?,
            "net.input_size" => self.net.input_size = parse_list(key, v)?,
            "net.base_channels" => self.net.base_channels = parse(key, v)?,
            "net.depth" => self.net.depth = parse(key, v)?,
            "net.n_classes" => self.net.n_classes = parse(key, v)?,
            "net.feature_channels" => self.net.feature_channels = parse(key, v)?,
            "distill.temperature" => self.distill.temperature = parse(key, v)?,
            "distill.hmsd_weight" => self.distill.hmsd_weight = parse(key, v)?,
            "distill.dmcd_weight" => self.distill.dmcd_weight = parse(key, v)?,
            "distill.carrier" => self.distill.carrier = Carrier::parse(v).map_err(as_config(key))?,
            "distill.hmsd_mode" => self.distill.hmsd_mode = HmsdMode::parse(v).map_err(as_config(key))?,
            "data.n_cases" => self.n_cases = parse(key, v)?,
            "data.seed" => self.data_seed = parse(key, v)?,
            "data.noise_std" => self.noise_std = parse(key, v)?,
            "data.texture_std" => self.texture_std = parse(key, v)?,
            "data.contrast" => {
                self.contrast_table = v
                    .split(';')
                    .map(|row| {
                        let vals: Vec<f64> = parse_list(key, row)?;
                        <[f64; N_REGIONS]>::try_from(vals).map_err(|vals| {
                            CcsdError::Config(format!("{key}: row {vals:?} needs {N_REGIONS} values (WT,TC,ET)"))
                        })
                    })
                    .collect::<Result<_>>()?
            }
            "data.split" => {
                let f: Vec<f64> = parse_list(key, v)?;
                let [a, b, c] = <[f64; 3]>::try_from(f)
                    .map_err(|_| CcsdError::Config(format!("{key}: expected three fractions train,val,test")))?;
                self.split = (a, b, c);
            }
            _ => {
                return Err(CcsdError::Config(format!(
                    "unknown key {key:?}; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "seed" => self.seed.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.lr" => self.lr.to_string(),
            "train.lr_min" => self.lr_min.to_string(),
            "train.eval_every" => self.eval_every.to_string(),
            "train.augment" => self.augment.to_string(),
            "train.path_strategy" => self.path_strategy.name().to_string(),
            "net.n_modalities" => self.net.n_modalities.to_string(),
            "net.spatial_rank" => self.net.spatial_rank.to_string(),
            "net.input_size" => join(&self.net.input_size),
            "net.base_channels" => self.net.base_channels.to_string(),
            "net.depth" => self.net.depth.to_string(),
            "net.n_classes" => self.net.n_classes.to_string(),
            "net.feature_channels" => self.net.feature_channels.to_string(),
            "distill.temperature" => self.distill.temperature.to_string(),
            "distill.hmsd_weight" => self.distill.hmsd_weight.to_string(),
            "distill.dmcd_weight" => self.distill.dmcd_weight.to_string(),
            "distill.carrier" => self.distill.carrier.name().to_string(),
            "distill.hmsd_mode" => self.distill.hmsd_mode.name().to_string(),
            "data.n_cases" => self.n_cases.to_string(),
            "data.seed" => self.data_seed.to_string(),
            "data.noise_std" => self.noise_std.to_string(),
            "data.texture_std" => self.texture_std.to_string(),
            "data.contrast" => self
                .contrast_table
                .iter()
                .map(|r| join(r))
                .collect::<Vec<_>>()
                .join(";"),
            "data.split" => join(&[self.split.0, self.split.1, self.split.2]),
            _ => return Err(CcsdError::Config(format!("unknown key {key:?}"))),
        })
    }

    /// Applies a `key = value` document on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CcsdError::Config(format!("line {}: expected `key = value`, got {line:?}", no + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies a `KEY=VALUE` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CcsdError::Config(format!("override {kv:?} is not KEY=VALUE")))?;
        self.set(k.trim(), v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CcsdError::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Reads `CCSD_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => self.seed = parse(SEED_ENV, &v)?,
            Err(std::env::VarError::NotPresent) => {}
            Err(e) => return Err(CcsdError::Config(format!("{SEED_ENV}: {e}"))),
        }
        Ok(())
    }

    /// Serializes every key; `apply_text` of the result reproduces `self`.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn phantom(&self) -> PhantomConfig {
        PhantomConfig {
            n_modalities: self.net.n_modalities,
            volume_size: self.net.input_size.clone(),
            n_cases: self.n_cases,
            seed: self.data_seed,
            contrast_table: self.contrast_table.clone(),
            noise_std: self.noise_std,
            texture_std: self.texture_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CcsdError::Config(m));
        if self.epochs < 1 {
            return bad("train.epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad(format!("train.lr_min must lie in [0, train.lr], got {}", self.lr_min));
        }
        if self.eval_every < 1 {
            return bad("train.eval_every must be at least 1".into());
        }
        if self.net.n_classes != 4 {
            return bad(format!(
                "net.n_classes must be 4 for the phantom labels (background + 3 regions), got {}",
                self.net.n_classes
            ));
        }
        self.net.validate().map_err(as_config("net"))?;
        self.distill.validate()?;
        self.phantom().validate()?;
        let (a, b, c) = self.split;
        if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
            return bad(format!("data.split fractions {:?} must lie in [0, 1] and sum to 1", self.split));
        }
        Ok(())
    }
}
