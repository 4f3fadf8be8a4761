//! Pipeline configuration: one JSON document drives every command.

use std::fs;
use std::path::{Path, PathBuf};

use capmin_core::data::SyntheticDatasetSpec;
use capmin_core::neuron::NeuronCircuitParams;
use capmin_core::train::TrainConfig;
use capmin_core::variation::VariationModel;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CircuitConfig {
    pub v0: f64,
    pub vth: f64,
    pub ion: f64,
    pub f_clk: f64,
    pub array_size: u32,
}

impl Default for CircuitConfig {
    fn default() -> Self {
        let p = NeuronCircuitParams::default();
        Self {
            v0: p.supply_voltage,
            vth: p.threshold_voltage,
            ion: p.cell_on_current,
            f_clk: p.clock_frequency,
            array_size: p.array_size,
        }
    }
}

impl CircuitConfig {
    pub fn params(&self) -> NeuronCircuitParams {
        NeuronCircuitParams {
            supply_voltage: self.v0,
            threshold_voltage: self.vth,
            cell_on_current: self.ion,
            clock_frequency: self.f_clk,
            array_size: self.array_size,
            x_max: self.array_size,
            ..NeuronCircuitParams::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariationConfig {
    pub rho: f64,
    /// Monte-Carlo samples per spike time.
    pub n_mc: usize,
    pub epsilon_quantile: f64,
    /// Inference runs averaged per variation point.
    pub runs: usize,
}

impl Default for VariationConfig {
    fn default() -> Self {
        Self {
            rho: 0.03,
            n_mc: 1000,
            epsilon_quantile: 0.999,
            runs: 3,
        }
    }
}

impl VariationConfig {
    pub fn model(&self, seed: u64) -> VariationModel {
        VariationModel {
            relative_std: self.rho,
            epsilon_quantile: self.epsilon_quantile,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapminConfig {
    /// Level count used by `size`.
    pub k: usize,
    /// Inclusive range swept by `sweep-k`, largest first.
    pub k_range: [usize; 2],
    pub include_zero: bool,
}

impl Default for CapminConfig {
    fn default() -> Self {
        Self {
            k: 16,
            k_range: [2, 33],
            include_zero: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapminvConfig {
    pub start_k: usize,
    /// Inclusive range of merge counts.
    pub phi_range: [usize; 2],
}

impl Default for CapminvConfig {
    fn default() -> Self {
        Self {
            start_k: 16,
            phi_range: [0, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub master: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { master: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataConfig {
    /// Regenerated from the spec; its `seed` field is replaced by one
    /// derived from the master seed.
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticDatasetSpec,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "default_threshold")]
        threshold: f64,
    },
}

fn default_threshold() -> f64 {
    0.5
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            spec: SyntheticDatasetSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub svg: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { svg: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    pub circuit: CircuitConfig,
    pub variation: VariationConfig,
    pub capmin: CapminConfig,
    pub capminv: CapminvConfig,
    pub seeds: SeedConfig,
    pub data: DataConfig,
    /// Trainer settings; `seed` is replaced by one derived from the master.
    pub train: TrainConfig,
    pub report: ReportConfig,
    pub paths: PathsConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            circuit: CircuitConfig::default(),
            variation: VariationConfig::default(),
            capmin: CapminConfig::default(),
            capminv: CapminvConfig::default(),
            seeds: SeedConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            report: ReportConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl Config {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths.out = base.join(&cfg.paths.out);
        if let DataConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = &mut cfg.data
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.circuit.params().with_capacitance(1.0).validate().map_err(config_err)?;
        self.variation.model(0).validate().map_err(config_err)?;
        if self.variation.n_mc == 0 || self.variation.runs == 0 {
            return Err(config_err("variation.n_mc and variation.runs must be positive"));
        }
        let levels = self.circuit.array_size as usize + 1;
        let max_k = if self.capmin.include_zero { levels } else { levels - 1 };
        let [lo, hi] = self.capmin.k_range;
        if lo == 0 || lo > hi || hi > max_k {
            return Err(config_err(format!("capmin.k_range must lie within [1, {max_k}]")));
        }
        for (name, k) in [("capmin.k", self.capmin.k), ("capminv.start_k", self.capminv.start_k)] {
            if k == 0 || k > max_k {
                return Err(config_err(format!("{name} = {k} outside [1, {max_k}]")));
            }
        }
        let [plo, phi] = self.capminv.phi_range;
        if plo > phi {
            return Err(config_err("capminv.phi_range is empty"));
        }
        if let DataConfig::Synthetic { spec } = &self.data {
            spec.validate().map_err(config_err)?;
        }
        self.train.validate().map_err(config_err)?;
        Ok(())
    }
}
