//! Run configuration: a flat TOML key-value file. Keys absent from the file
//! take the defaults below, which reproduce the MNIST/LeNet protocol.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::{ControllerConfig, PerAttribute};
use crate::error::{Error, Result};
use crate::fixed_point::{FixedPointFormat, RoundingMode};
use crate::harness::{RunMode, SaturationGrad};
use crate::nn::SgdConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RunMode,
    /// Directory holding the four standard MNIST IDX files.
    pub data_dir: PathBuf,
    /// Use only the first N training examples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    /// Use only the first N test examples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    pub iterations: usize,
    pub batch_size: usize,

    pub lr_init: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_gamma: f64,
    pub lr_power: f64,

    pub rounding: RoundingMode,
    /// Gradient rule at saturated activations.
    pub saturation_grad: SaturationGrad,
    pub r_max: f64,
    pub e_max: f64,
    pub il_min: u32,
    pub il_max: u32,
    pub fl_min: u32,
    pub fl_max: u32,
    pub total_width_max: u32,

    /// Starting `[IL, FL]` per attribute in DPS mode.
    pub init_weights: FixedPointFormat,
    pub init_activations: FixedPointFormat,
    pub init_gradients: FixedPointFormat,
    /// Fixed `[IL, FL]` per attribute in static mode.
    pub static_weights: FixedPointFormat,
    pub static_activations: FixedPointFormat,
    pub static_gradients: FixedPointFormat,

    pub seed_init: u64,
    pub seed_shuffle: u64,
    pub seed_quant: u64,

    /// Evaluate test error every N iterations (and after the last one).
    pub eval_interval: usize,
    /// Quantize weights and activations during evaluation in quantized modes.
    pub eval_quantized: bool,
    pub output_dir: PathBuf,
}

fn f(il: u32, fl: u32) -> FixedPointFormat {
    FixedPointFormat::new(il, fl).expect("default format is legal")
}

impl Default for RunConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        let ctl = ControllerConfig::default();
        RunConfig {
            mode: RunMode::Dps,
            data_dir: PathBuf::from("data/mnist"),
            train_limit: None,
            test_limit: None,
            iterations: 10_000,
            batch_size: 64,
            lr_init: sgd.lr_init,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            lr_gamma: sgd.gamma,
            lr_power: sgd.power,
            rounding: RoundingMode::Stochastic,
            saturation_grad: SaturationGrad::Mask,
            r_max: ctl.r_max,
            e_max: ctl.e_max,
            il_min: ctl.il_bounds.0,
            il_max: ctl.il_bounds.1,
            fl_min: ctl.fl_bounds.0,
            fl_max: ctl.fl_bounds.1,
            total_width_max: ctl.total_width_max,
            init_weights: f(2, 14),
            init_activations: f(2, 14),
            init_gradients: f(2, 14),
            static_weights: f(3, 10),
            static_activations: f(3, 10),
            static_gradients: f(8, 24),
            seed_init: 1,
            seed_shuffle: 2,
            seed_quant: 3,
            eval_interval: 500,
            eval_quantized: true,
            output_dir: PathBuf::from("runs/out"),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// The complete effective configuration, loadable by [`Self::from_toml_str`].
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr_init: self.lr_init,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            gamma: self.lr_gamma,
            power: self.lr_power,
        }
    }

    pub fn controller(&self) -> ControllerConfig {
        ControllerConfig {
            r_max: self.r_max,
            e_max: self.e_max,
            il_bounds: (self.il_min, self.il_max),
            fl_bounds: (self.fl_min, self.fl_max),
            total_width_max: self.total_width_max,
        }
    }

    pub fn initial_formats(&self) -> PerAttribute<FixedPointFormat> {
        PerAttribute {
            weights: self.init_weights,
            activations: self.init_activations,
            gradients: self.init_gradients,
        }
    }

    pub fn static_formats(&self) -> PerAttribute<FixedPointFormat> {
        PerAttribute {
            weights: self.static_weights,
            activations: self.static_activations,
            gradients: self.static_gradients,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be at least 1".into()));
        }
        if self.train_limit == Some(0) || self.test_limit == Some(0) {
            return Err(Error::Config("dataset limits must be positive".into()));
        }
        self.sgd().validate()?;
        let ctl = self.controller();
        ctl.validate()?;
        if self.mode == RunMode::Dps {
            for (a, fmt) in self.initial_formats().iter() {
                if !ctl.admits(*fmt) {
                    return Err(Error::Config(format!("initial {a} format {fmt} violates the controller bounds")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(text.contains("batch_size = 64"));
        assert!(text.contains("init_weights = [2, 14]"));
    }

    #[test]
    fn partial_file_merges_with_defaults() {
        let cfg = RunConfig::from_toml_str("mode = \"static_fixed\"\niterations = 20\nr_max = inf\n").unwrap();
        assert_eq!(cfg.mode, RunMode::StaticFixed);
        assert_eq!(cfg.iterations, 20);
        assert_eq!(cfg.r_max, f64::INFINITY);
        assert_eq!(cfg.batch_size, 64);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml_str("batch_size = 0").is_err());
        assert!(RunConfig::from_toml_str("unknown_key = 1").is_err());
        assert!(RunConfig::from_toml_str("init_weights = [0, 4]").is_err());
        assert!(RunConfig::from_toml_str("init_weights = [20, 20]").is_err());
        assert!(RunConfig::from_toml_str("momentum = 1.5").is_err());
        assert!(RunConfig::from_toml_str("init_weights = [17, 4]").is_err());
    }
}
