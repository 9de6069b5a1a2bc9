//! Layered run configuration: preset, then TOML file, then `key=value`
//! overrides. The last layer to set a key wins.
//!
//! ```toml
//! seed = 0
//! folds = 5
//!
//! [pretrain]
//! strategy = "ordered"
//! epochs = 200
//!
//! [lineval]
//! label_fraction = 0.2
//! ```
//!
//! Every section mirrors a library config struct: `synth` is
//! [`SynthConfig`], `pretrain` is [`PretrainConfig`], `finetune` and
//! `lineval` are [`FinetuneConfig`]. The top-level `seed` is copied into
//! every section, so one seed drives the whole run.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::dataset::{SynthConfig, LABEL_FRACTIONS};
use crate::error::{Error, Result};
use crate::model::OptimizerKind;
use crate::report::{TableLayout, TableMetric, DEFAULT_CAM_LAYER};
use crate::train::{FinetuneConfig, PretrainConfig};
use crate::transforms::AugmentationPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
    /// Which stage the sweep runs: `finetune` or `lineval`.
    pub stage: String,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.05, 0.2, 1.0],
            stage: "lineval".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub cam_layer: String,
    /// Grad-CAM maps are rendered for this many test images.
    pub cam_images: usize,
    pub layout: TableLayout,
    pub metric: TableMetric,
    pub overlay_alpha: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            cam_layer: DEFAULT_CAM_LAYER.into(),
            cam_images: 4,
            layout: TableLayout::Breakhis,
            metric: TableMetric::Ila,
            overlay_alpha: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub folds: usize,
    pub synth: SynthConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub lineval: FinetuneConfig,
    pub sweep: SweepConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Preset::SynthFast.config()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// EfficientNet-b2 hyperparameters as published; needs external weights.
    PaperEffnet,
    /// ResNet-50 hyperparameters as published; needs external weights.
    PaperResnet,
    /// Desk-scale smoke run, 20 pre-training epochs.
    SynthFast,
    /// Desk-scale run, 200 pre-training epochs.
    SynthFull,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::PaperEffnet, Preset::PaperResnet, Preset::SynthFast, Preset::SynthFull];

    pub fn name(self) -> &'static str {
        match self {
            Preset::PaperEffnet => "paper-effnet",
            Preset::PaperResnet => "paper-resnet",
            Preset::SynthFast => "synth-fast",
            Preset::SynthFull => "synth-full",
        }
    }

    pub fn config(self) -> RunConfig {
        let synth_pretrain = |epochs| PretrainConfig {
            epochs,
            ..PretrainConfig::default()
        };
        let paper_finetune = FinetuneConfig {
            learning_rate: 2e-5,
            batch_size: 32,
            input_size: 224,
            dropout: 0.3,
            ..FinetuneConfig::default()
        };
        let paper_lineval = FinetuneConfig {
            learning_rate: 2e-5,
            input_size: 224,
            ..FinetuneConfig::linear()
        };
        let paper_pretrain = |encoder: &str, optimizer, batch_size, input_size: usize| PretrainConfig {
            encoder: encoder.into(),
            epochs: 1000,
            learning_rate: 1e-5,
            temperature: 0.01,
            optimizer,
            batch_size,
            input_size,
            augmentation: AugmentationPolicy::pretrain(input_size as u32),
            ..PretrainConfig::default()
        };
        let (pretrain, finetune, lineval) = match self {
            Preset::PaperEffnet => (
                paper_pretrain("efficientnet_b2", OptimizerKind::Adam, 128, 341),
                paper_finetune,
                paper_lineval,
            ),
            Preset::PaperResnet => (
                paper_pretrain("resnet50", OptimizerKind::Lars, 1024, 224),
                paper_finetune,
                paper_lineval,
            ),
            Preset::SynthFast => (synth_pretrain(20), FinetuneConfig::default(), FinetuneConfig::linear()),
            Preset::SynthFull => (synth_pretrain(200), FinetuneConfig::default(), FinetuneConfig::linear()),
        };
        RunConfig {
            preset: self.name().into(),
            seed: 0,
            folds: 5,
            synth: SynthConfig::default(),
            pretrain,
            finetune,
            lineval,
            sweep: SweepConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!("unknown preset {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

fn to_table(cfg: &RunConfig) -> Result<Table> {
    match Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))? {
        Value::Table(t) => Ok(t),
        _ => unreachable!("struct serialises to a table"),
    }
}

/// Recursive merge; tables merge key by key, everything else is replaced.
fn merge(base: &mut Table, overlay: Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the value half of `key=value` as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for p in parents {
        table = match table.get_mut(*p) {
            Some(Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown config section {p:?} in {key:?}"))),
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Every key of `given` must survive a round trip through [`RunConfig`];
/// keys serde ignored are typos.
fn check_known(given: &Table, resolved: &Table, prefix: &str) -> Result<()> {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, resolved.get(k)) {
            (_, None) => return Err(Error::Config(format!("unknown config key {path:?}"))),
            (Value::Table(g), Some(Value::Table(r))) => check_known(g, r, &path)?,
            _ => {}
        }
    }
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Resolves preset, optional TOML file and overrides, in that order.
pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut merged = to_table(&preset.config())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let layer: Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut merged, layer);
    }
    for (k, v) in overrides {
        set_path(&mut merged, k, parse_value(v))?;
    }
    let mut cfg: RunConfig = Value::Table(merged.clone())
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    check_known(&merged, &to_table(&cfg)?, "")?;
    cfg.propagate_seed();
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Copies the top-level seed into every section.
    pub fn propagate_seed(&mut self) {
        self.synth.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
        self.lineval.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 3 {
            return Err(Error::Config(format!("folds must be at least 3, got {}", self.folds)));
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.lineval.validate()?;
        for &f in &self.sweep.fractions {
            if !LABEL_FRACTIONS.iter().any(|&l| (l - f).abs() < 1e-9) {
                return Err(Error::Config(format!(
                    "sweep fraction {f} is not one of the planned fractions {LABEL_FRACTIONS:?}"
                )));
            }
        }
        if !matches!(self.sweep.stage.as_str(), "finetune" | "lineval") {
            return Err(Error::Config(format!(
                "sweep.stage must be finetune or lineval, got {:?}",
                self.sweep.stage
            )));
        }
        if !(0.0..=1.0).contains(&self.report.overlay_alpha) {
            return Err(Error::Config("report.overlay_alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
