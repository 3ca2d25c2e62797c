//! The single JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::OperatingPoint;
use crate::losses::StageWeights;
use crate::metrics::{DEFAULT_BAND_RADIUS, DEFAULT_ECE_BINS, MIN_RESAMPLES};
use crate::opsearch::SearchSpace;
use crate::phantom::PhantomSpec;
use crate::pseudo::PseudoConfig;
use crate::rabc::{AdaptConfig, RabcLossParams, DEFAULT_HIDDEN};

/// The published per-dataset operating points plus the untuned control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatingPoints {
    pub isic2017: OperatingPoint,
    pub isic2018: OperatingPoint,
    pub ph2: OperatingPoint,
    pub raw_p0: OperatingPoint,
}

impl Default for OperatingPoints {
    fn default() -> Self {
        Self {
            isic2017: OperatingPoint::isic2017(),
            isic2018: OperatingPoint::isic2018(),
            ph2: OperatingPoint::ph2(),
            raw_p0: OperatingPoint::raw_p0(),
        }
    }
}

impl OperatingPoints {
    pub fn get(&self, name: &str) -> Result<&OperatingPoint> {
        match name {
            "isic2017" => Ok(&self.isic2017),
            "isic2018" => Ok(&self.isic2018),
            "ph2" => Ok(&self.ph2),
            "raw_p0" | "raw-p0" => Ok(&self.raw_p0),
            _ => Err(Error::Config(format!("unknown operating point `{name}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RabcSettings {
    /// Adds the RABC arm to end-to-end runs.
    pub enabled: bool,
    pub hidden: usize,
    pub init_seed: u64,
    pub loss: RabcLossParams,
}

impl Default for RabcSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            hidden: DEFAULT_HIDDEN,
            init_seed: 0,
            loss: RabcLossParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSettings {
    pub steps: usize,
    pub lr: f64,
    pub window: usize,
    /// Side of the boundary crop taken from each image.
    pub crop: usize,
}

impl Default for AdaptSettings {
    fn default() -> Self {
        let d = AdaptConfig::default();
        Self {
            steps: d.steps,
            lr: d.lr,
            window: d.window,
            crop: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSettings {
    pub band_radius: usize,
    pub ece_bins: usize,
    pub resamples: usize,
    pub bootstrap_seed: u64,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            band_radius: DEFAULT_BAND_RADIUS,
            ece_bins: DEFAULT_ECE_BINS,
            resamples: MIN_RESAMPLES,
            bootstrap_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DilationSettings {
    /// Candidate iteration counts for the dilation control arm.
    pub iterations: Vec<usize>,
}

impl Default for DilationSettings {
    fn default() -> Self {
        Self {
            iterations: vec![0, 1, 2, 3],
        }
    }
}

/// Inputs of an end-to-end run. Validation and test live under separate keys
/// and must not overlap.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub phantom: PhantomSpec,
    pub pseudo: PseudoConfig,
    pub operating_points: OperatingPoints,
    pub stage1: StageWeights,
    pub stage2: StageWeights,
    pub rabc: RabcSettings,
    pub adapt: AdaptSettings,
    pub search: SearchSpace,
    pub metrics: MetricSettings,
    pub dilation: DilationSettings,
    pub paths: Paths,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec::default(),
            pseudo: PseudoConfig::default(),
            operating_points: OperatingPoints::default(),
            stage1: StageWeights::stage1(),
            stage2: StageWeights::stage2(),
            rabc: RabcSettings::default(),
            adapt: AdaptSettings::default(),
            search: SearchSpace::default(),
            metrics: MetricSettings::default(),
            dilation: DilationSettings::default(),
            paths: Paths::default(),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        for op in [
            &self.operating_points.isic2017,
            &self.operating_points.isic2018,
            &self.operating_points.ph2,
            &self.operating_points.raw_p0,
        ] {
            op.validate()?;
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.rabc.loss.validate()?;
        if self.rabc.hidden == 0 {
            return Err(Error::Config("rabc.hidden must be >= 1".into()));
        }
        if self.adapt.steps == 0 || self.adapt.crop == 0 || !(self.adapt.lr >= 0.0) {
            return Err(Error::Config(
                "adapt needs steps >= 1, crop >= 1 and lr >= 0".into(),
            ));
        }
        self.search.validate()?;
        if self.metrics.resamples < MIN_RESAMPLES || self.metrics.ece_bins == 0 {
            return Err(Error::Config(format!(
                "metrics needs resamples >= {MIN_RESAMPLES} and ece_bins >= 1"
            )));
        }
        if self.dilation.iterations.is_empty() {
            return Err(Error::Config("dilation.iterations must be nonempty".into()));
        }
        Ok(())
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            steps: self.adapt.steps,
            lr: self.adapt.lr,
            loss: self.rabc.loss.clone(),
            weights: self.stage2.rabc,
            window: self.adapt.window,
        }
    }
}
