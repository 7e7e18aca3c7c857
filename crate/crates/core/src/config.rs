//! Experiment configuration: one TOML document per experiment covering
//! dataset, windowing, normalizer, backbone, training, and output location.
//! Every field has a default except the dataset itself.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneKind, BackboneParams};
use crate::engine::{NormalizerParams, TrainConfig};
use crate::error::{Error, Result};
use crate::normalizers::{LcdParams, LcdVariant, LdParams, Level, RevInParams};
use crate::synth::SynthConfig;

/// Conventional pairing of forecast horizons with lookback lengths.
/// Returns the lookback for a known horizon.
pub fn preset_lookback(horizon: usize) -> Option<usize> {
    match horizon {
        24 => Some(24),
        48 => Some(48),
        96 => Some(72),
        168 => Some(96),
        192 => Some(120),
        336 => Some(192),
        720 => Some(360),
        _ => None,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Csv {
        path: PathBuf,
        #[serde(default)]
        timestamp_column: bool,
    },
    Synth {
        #[serde(default)]
        synth: SynthConfig,
    },
    Builtin {
        name: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizerConfig {
    /// zscore | revin | ld | lcd-linear | lcd-as
    pub method: String,
    pub level: Level,
    pub individual: bool,
    pub centered_input: bool,
    pub use_scale: bool,
    pub eps: f64,
}

impl Default for NormalizerConfig {
    fn default() -> Self {
        NormalizerConfig {
            method: "zscore".into(),
            level: Level::Point,
            individual: true,
            centered_input: true,
            use_scale: false,
            eps: 1e-5,
        }
    }
}

impl NormalizerConfig {
    pub fn validate(&self) -> Result<()> {
        const KNOWN: [&str; 5] = ["zscore", "revin", "ld", "lcd-linear", "lcd-as"];
        if !KNOWN.contains(&self.method.as_str()) {
            return Err(Error::Config(format!(
                "normalizer.method: unknown method '{}' (expected one of {})",
                self.method,
                KNOWN.join("|")
            )));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config("normalizer.eps must be positive".into()));
        }
        Ok(())
    }

    pub fn build(&self, lookback: usize, horizon: usize, d: usize) -> Result<NormalizerParams> {
        self.validate()?;
        Ok(match self.method.as_str() {
            "zscore" => NormalizerParams::ZScore,
            "revin" => NormalizerParams::RevIn(RevInParams::new(d)),
            "ld" => NormalizerParams::Ld(LdParams::new(
                lookback,
                horizon,
                d,
                self.level,
                self.use_scale,
            )),
            "lcd-linear" | "lcd-as" => {
                let variant = if self.method == "lcd-linear" {
                    LcdVariant::Linear
                } else {
                    LcdVariant::Attention
                };
                NormalizerParams::Lcd(LcdParams::new(
                    variant,
                    lookback,
                    horizon,
                    d,
                    self.level,
                    self.individual,
                    self.centered_input,
                ))
            }
            _ => unreachable!("validated above"),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub shared: bool,
    /// dlinear moving-average kernel.
    pub kernel: usize,
    /// mlp hidden width.
    pub hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { kind: BackboneKind::Linear, shared: false, kernel: 25, hidden: 64 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 {
            return Err(Error::Config("backbone.kernel must be at least 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("backbone.hidden must be at least 1".into()));
        }
        Ok(())
    }

    pub fn build(
        &self,
        lookback: usize,
        horizon: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> BackboneParams {
        match self.kind {
            BackboneKind::Identity => BackboneParams::identity(lookback, horizon),
            BackboneKind::Linear => {
                BackboneParams::linear(lookback, horizon, d, self.shared, rng)
            }
            BackboneKind::DLinear => {
                BackboneParams::dlinear(lookback, horizon, d, self.kernel, self.shared, rng)
            }
            BackboneKind::Mlp => {
                BackboneParams::mlp(lookback, horizon, d, self.hidden, self.shared, rng)
            }
        }
    }
}

fn default_horizon() -> usize {
    48
}

fn default_stride() -> usize {
    1
}

fn default_split() -> (f64, f64, f64) {
    (0.7, 0.1, 0.2)
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    /// Omitted: derived from `horizon` via the preset pairing.
    #[serde(default)]
    pub lookback: Option<usize>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_split")]
    pub split: (f64, f64, f64),
    /// 0 keeps all features.
    #[serde(default)]
    pub max_features: usize,
    #[serde(default)]
    pub normalizer: NormalizerConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Lookback after preset resolution.
    pub fn resolved_lookback(&self) -> Result<usize> {
        match self.lookback {
            Some(l) => Ok(l),
            None => preset_lookback(self.horizon).ok_or_else(|| {
                Error::Config(format!(
                    "lookback: no preset pairing for horizon {}; set lookback explicitly",
                    self.horizon
                ))
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lookback = self.resolved_lookback()?;
        if lookback < 2 {
            return Err(Error::Config("lookback must be at least 2".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        let (a, b, c) = self.split;
        if !(a > 0.0 && b > 0.0 && c > 0.0) || a + b + c > 1.0 + 1e-9 {
            return Err(Error::Config(
                "split: all three ratios must be positive and sum to at most 1".into(),
            ));
        }
        match &self.dataset {
            DatasetConfig::Csv { path, .. } => {
                if !path.exists() {
                    return Err(Error::Config(format!(
                        "dataset.path: {} does not exist",
                        path.display()
                    )));
                }
            }
            DatasetConfig::Synth { synth } => synth
                .validate()
                .map_err(|e| Error::Config(format!("dataset.synth: {e}")))?,
            DatasetConfig::Builtin { name } => {
                if name != "etth1" {
                    return Err(Error::Config(format!(
                        "dataset.name: unknown builtin '{name}' (expected etth1)"
                    )));
                }
            }
        }
        self.normalizer.validate()?;
        self.backbone.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: list must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialization")
    }
}
