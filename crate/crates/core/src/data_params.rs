use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::TemperatureMode;

/// Default starting value of the weight-decay coefficient.
pub const DEFAULT_LAMBDA_WD: f64 = 5e-4;

/// Which learning-rate multipliers the meta engine learns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    Instance,
    Class,
    None,
}

impl std::str::FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "instance" => Ok(Self::Instance),
            "class" => Ok(Self::Class),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Every data-dependent parameter: learning-rate multipliers, the weight
/// decay coefficient and optional temperature tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataParamState {
    pub w_inst: Vec<f64>,
    pub w_class: Vec<f64>,
    pub lambda_wd: f64,
    pub sigma_class: Option<Vec<f64>>,
    pub sigma_inst: Option<Vec<f64>>,
    pub mode: WeightMode,
    pub wd_learnable: bool,
    pub history_reset: bool,
}

impl DataParamState {
    pub fn new(n_instances: usize, n_classes: usize, mode: WeightMode, lambda_wd: f64) -> Self {
        Self {
            w_inst: vec![1.0; n_instances],
            w_class: vec![1.0; n_classes],
            lambda_wd,
            sigma_class: None,
            sigma_inst: None,
            mode,
            wd_learnable: false,
            history_reset: false,
        }
    }

    /// No tables at all; only valid with unweighted plain cross-entropy.
    pub fn empty() -> Self {
        Self::new(0, 0, WeightMode::None, 0.0)
    }

    /// Allocates the temperature tables for `mode`. In joint mode the class
    /// table starts at 1 and the instance table at 0 so the sum starts at 1.
    pub fn enable_temperature(&mut self, mode: TemperatureMode) {
        let n = self.w_inst.len();
        let k = self.w_class.len();
        match mode {
            TemperatureMode::Class => {
                self.sigma_class = Some(vec![1.0; k]);
            }
            TemperatureMode::Instance => {
                self.sigma_inst = Some(vec![1.0; n]);
            }
            TemperatureMode::Joint => {
                self.sigma_class = Some(vec![1.0; k]);
                self.sigma_inst = Some(vec![0.0; n]);
            }
        }
    }

    /// Multiplier applied to instance `index` with training label `label`.
    pub fn effective_weight(&self, index: usize, label: usize) -> f64 {
        match self.mode {
            WeightMode::Instance => self.w_inst[index],
            WeightMode::Class => self.w_class[label],
            WeightMode::None => 1.0,
        }
    }

    pub fn reset_weights(&mut self) {
        self.w_inst.iter_mut().for_each(|w| *w = 1.0);
        self.w_class.iter_mut().for_each(|w| *w = 1.0);
    }

    pub fn check_dims(&self, n_instances: usize, n_classes: usize) -> Result<()> {
        if self.w_inst.len() != n_instances {
            return Err(Error::LengthMismatch {
                expected: n_instances,
                got: self.w_inst.len(),
            });
        }
        if self.w_class.len() != n_classes {
            return Err(Error::LengthMismatch {
                expected: n_classes,
                got: self.w_class.len(),
            });
        }
        Ok(())
    }
}
