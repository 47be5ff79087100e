//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key maps to
//! one field of [`NetworkConfig`], [`TrainConfig`] or the run itself, and
//! unknown keys are rejected with their line number. `config.resolved` in a
//! run directory is written in the same format and can be fed back in.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::VfMode;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::train::augment::AugmentConfig;
use crate::train::data::{Normalization, TRAIN_RATIO};
use crate::train::TrainConfig;

/// Environment variable naming the default dataset root.
pub const DATA_ROOT_ENV: &str = "VFFM_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(Error::Config(format!("precision must be f32 or f64, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub train_ratio: f64,
    pub data_root: Option<PathBuf>,
    pub run_dir: PathBuf,
    pub threads: usize,
    pub precision: Precision,
    /// Input normalisation of a finished run; fitted on the training split
    /// when absent.
    pub norm: Option<Normalization>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            net: NetworkConfig::default(),
            train: TrainConfig::default(),
            train_ratio: TRAIN_RATIO,
            data_root: None,
            run_dir: PathBuf::from("runs/latest"),
            threads: 1,
            precision: Precision::F32,
            norm: None,
        }
    }
}

/// Every accepted key, in the order `config.resolved` lists them.
pub const KEYS: &[&str] = &[
    "stage_channels",
    "heads",
    "pooled_len",
    "input_channels",
    "input_size",
    "vf_mode",
    "lr_max",
    "lr_min",
    "weight_decay",
    "period",
    "batch_size",
    "epochs",
    "loss_weight",
    "seed",
    "hflip",
    "vflip",
    "rotate",
    "train_ratio",
    "data_root",
    "run_dir",
    "threads",
    "precision",
    "norm_mean",
    "norm_std",
];

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| e.to_string())
}

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|v| parse(v.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Reads `path` on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)));
            };
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Applies one `KEY=VALUE` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override must look like key=value, got {pair:?}")))?;
        self.set(key.trim(), value.trim()).map_err(Error::Config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let bad = |e: String| format!("invalid value {value:?} for key `{key}`: {e}");
        let n = &mut self.net;
        let t = &mut self.train;
        match key {
            "stage_channels" => n.stage_channels = parse_list(value).map_err(bad)?,
            "heads" => n.heads = parse(value).map_err(bad)?,
            "pooled_len" => n.pooled_len = parse(value).map_err(bad)?,
            "input_channels" => n.input_channels = parse(value).map_err(bad)?,
            "input_size" => n.input_size = parse(value).map_err(bad)?,
            "vf_mode" => n.vf_mode = parse::<VfMode>(value).map_err(bad)?,
            "lr_max" => t.lr_max = parse(value).map_err(bad)?,
            "lr_min" => t.lr_min = parse(value).map_err(bad)?,
            "weight_decay" => t.weight_decay = parse(value).map_err(bad)?,
            "period" => t.period = parse(value).map_err(bad)?,
            "batch_size" => t.batch_size = parse(value).map_err(bad)?,
            "epochs" => t.epochs = parse(value).map_err(bad)?,
            "loss_weight" => t.loss_weight = parse(value).map_err(bad)?,
            "seed" => t.seed = parse(value).map_err(bad)?,
            "hflip" => t.augment.hflip = parse(value).map_err(bad)?,
            "vflip" => t.augment.vflip = parse(value).map_err(bad)?,
            "rotate" => t.augment.rotate = parse(value).map_err(bad)?,
            "train_ratio" => self.train_ratio = parse(value).map_err(bad)?,
            "data_root" => self.data_root = (!value.is_empty()).then(|| PathBuf::from(value)),
            "run_dir" => self.run_dir = PathBuf::from(value),
            "threads" => self.threads = parse(value).map_err(bad)?,
            "precision" => self.precision = parse(value).map_err(bad)?,
            "norm_mean" | "norm_std" => {
                let v: Vec<f64> = if value.is_empty() { Vec::new() } else { parse_list(value).map_err(bad)? };
                let norm = self.norm.get_or_insert_with(|| Normalization {
                    mean: Vec::new(),
                    std: Vec::new(),
                });
                if key == "norm_mean" {
                    norm.mean = v;
                } else {
                    norm.std = v;
                }
                if norm.mean.is_empty() && norm.std.is_empty() {
                    self.norm = None;
                }
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.train_ratio) {
            return Err(Error::Config(format!("train_ratio must lie in [0, 1], got {}", self.train_ratio)));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        if let Some(norm) = &self.norm {
            let c = self.net.input_channels;
            if norm.mean.len() != c || norm.std.len() != c {
                return Err(Error::Config(format!(
                    "norm_mean and norm_std need {c} values each, got {} and {}",
                    norm.mean.len(),
                    norm.std.len()
                )));
            }
            if norm.std.iter().any(|&s| s.is_nan() || s <= 0.0) {
                return Err(Error::Config("norm_std values must be positive".into()));
            }
        }
        Ok(())
    }

    /// The explicit dataset root, else the environment default.
    pub fn resolve_data_root(&self) -> Result<PathBuf> {
        if let Some(root) = &self.data_root {
            return Ok(root.clone());
        }
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
            _ => Err(Error::Config(format!(
                "no dataset root: set `data_root`, pass --data, or export {DATA_ROOT_ENV}"
            ))),
        }
    }

    /// `key = value` for every key in [`KEYS`], parseable by [`Self::apply_text`].
    pub fn render(&self) -> String {
        let n = &self.net;
        let t = &self.train;
        let AugmentConfig { hflip, vflip, rotate } = t.augment;
        let (mean, std) = self.norm.as_ref().map_or((String::new(), String::new()), |nm| (join(&nm.mean), join(&nm.std)));
        let values: Vec<(&str, String)> = vec![
            ("stage_channels", join(&n.stage_channels)),
            ("heads", n.heads.to_string()),
            ("pooled_len", n.pooled_len.to_string()),
            ("input_channels", n.input_channels.to_string()),
            ("input_size", n.input_size.to_string()),
            ("vf_mode", n.vf_mode.to_string()),
            ("lr_max", t.lr_max.to_string()),
            ("lr_min", t.lr_min.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("period", t.period.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("loss_weight", t.loss_weight.to_string()),
            ("seed", t.seed.to_string()),
            ("hflip", hflip.to_string()),
            ("vflip", vflip.to_string()),
            ("rotate", rotate.to_string()),
            ("train_ratio", self.train_ratio.to_string()),
            ("data_root", self.data_root.as_ref().map_or(String::new(), |p| p.display().to_string())),
            ("run_dir", self.run_dir.display().to_string()),
            ("threads", self.threads.to_string()),
            ("precision", self.precision.to_string()),
            ("norm_mean", mean),
            ("norm_std", std),
        ];
        debug_assert_eq!(values.iter().map(|(k, _)| *k).collect::<Vec<_>>(), KEYS);
        let mut out = String::new();
        for (k, v) in values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
