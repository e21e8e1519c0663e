//! Training configuration file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowDirection;
use crate::hosts::HostKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Dynamic attention; off means the host runs alone with its own head.
    #[serde(rename = "DA")]
    pub da: bool,
    /// Per-region parameter generation; off means one shared triple.
    #[serde(rename = "PG")]
    pub pg: bool,
    /// Attentive Chebyshev refinement.
    #[serde(rename = "AR")]
    pub ar: bool,
}

impl Ablation {
    pub const NONE: Ablation = Ablation { da: false, pg: false, ar: false };
    pub const DA: Ablation = Ablation { da: true, pg: false, ar: false };
    pub const DA_PG: Ablation = Ablation { da: true, pg: true, ar: false };
    pub const FULL: Ablation = Ablation { da: true, pg: true, ar: true };

    /// The four rows of the ablation table, in order.
    pub const TABLE: [Ablation; 4] = [Self::NONE, Self::DA, Self::DA_PG, Self::FULL];

    pub fn label(&self) -> String {
        if !self.da {
            return "none".into();
        }
        let mut parts = vec!["DA"];
        if self.pg {
            parts.push("PG");
        }
        if self.ar {
            parts.push("AR");
        }
        parts.join("+")
    }

    pub fn validate(&self) -> Result<()> {
        if !self.da && (self.pg || self.ar) {
            return Err(Error::config("PG and AR require DA"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for Split {
    fn default() -> Self {
        Split {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

fn default_direction() -> FlowDirection {
    FlowDirection::Inflow
}

fn default_stride() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_after: f64,
    pub lr_switch_epoch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub d: usize,
    pub d_prime: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub threshold: f64,
    pub ablation: Ablation,
    pub host: HostKind,
    pub split: Split,
    /// Which flow tensor is forecast.
    #[serde(default = "default_direction")]
    pub direction: FlowDirection,
    /// Offset between consecutive sample windows, in slots.
    #[serde(default = "default_stride")]
    pub window_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr_initial: 0.01,
            lr_after: 0.001,
            lr_switch_epoch: 75,
            epochs: 150,
            seed: 0,
            d: 32,
            d_prime: 16,
            k: 3,
            threshold: 0.4,
            ablation: Ablation::FULL,
            host: HostKind::TemporalLinear,
            split: Split::default(),
            direction: FlowDirection::Inflow,
            window_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_after > 0.0 && self.lr_after <= self.lr_initial) {
            return Err(Error::config(format!(
                "need 0 < lr_after <= lr_initial, got {} and {}",
                self.lr_after, self.lr_initial
            )));
        }
        if self.lr_switch_epoch > self.epochs {
            return Err(Error::config("lr_switch_epoch exceeds epochs"));
        }
        let s = self.split;
        if [s.train, s.val, s.test].iter().any(|f| !(0.0..=1.0).contains(f))
            || (s.train + s.val + s.test - 1.0).abs() > 1e-9
        {
            return Err(Error::config(format!("split fractions {s:?} must be in [0, 1] and sum to 1")));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.window_stride == 0 {
            return Err(Error::config("batch_size, epochs and window_stride must be positive"));
        }
        if self.d == 0 || self.d_prime == 0 || self.k == 0 {
            return Err(Error::config("d, d_prime and K must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold must lie in (0, 1)"));
        }
        self.ablation.validate()
    }

    /// Learning rate of 1-based `epoch`.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch <= self.lr_switch_epoch {
            self.lr_initial
        } else {
            self.lr_after
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_slice(&fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
