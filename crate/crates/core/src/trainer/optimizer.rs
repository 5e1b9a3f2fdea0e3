//! Layer-wise learning rates with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::model::{ModelParams, ParamGroup};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `p <- p (1 - lr wd) - lr g`.
    #[default]
    Sgd,
    /// Adam moments with the same decoupled decay.
    Adamw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub base_lr_backbone: f64,
    pub base_lr_projection: f64,
    pub base_lr_classifier: f64,
    /// Scales all three base rates, preserving their ratios.
    pub global_lr_multiplier: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            base_lr_backbone: 1e-6,
            base_lr_projection: 1e-4,
            base_lr_classifier: 1e-5,
            global_lr_multiplier: 100.0,
            weight_decay: 1e-4,
            epochs: 50,
            batch_size: 64,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self, group: ParamGroup) -> f64 {
        let base = match group {
            ParamGroup::Backbone => self.base_lr_backbone,
            ParamGroup::Projection => self.base_lr_projection,
            ParamGroup::Classifier => self.base_lr_classifier,
        };
        base * self.global_lr_multiplier
    }

    pub fn validate(&self) -> Result<()> {
        if ParamGroup::ALL.iter().any(|&g| !(self.lr(g) > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 (two speakers per batch)".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("invalid Adam constants".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(config: &OptimizerConfig, params: &ModelParams) -> Self {
        let n = match config.kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adamw => params.values().len(),
        };
        Self { config: config.clone(), step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update in place.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &[f64]) -> Result<()> {
        if grads.len() != params.values().len() {
            return Err(Error::DimensionMismatch { what: "gradient", expected: params.values().len(), actual: grads.len() });
        }
        self.step += 1;
        let cfg = &self.config;
        let wd = cfg.weight_decay;
        let ranges: Vec<_> = ParamGroup::ALL
            .iter()
            .map(|&g| (cfg.lr(g), params.layout().group_ranges(g)))
            .collect();
        let values = params.values_mut();
        match cfg.kind {
            OptimizerKind::Sgd => {
                for (lr, rs) in &ranges {
                    let decay = 1.0 - lr * wd;
                    for r in rs {
                        for i in r.clone() {
                            values[i] = values[i] * decay - lr * grads[i];
                        }
                    }
                }
            }
            OptimizerKind::Adamw => {
                let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
                let c1 = 1.0 - b1.powi(self.step as i32);
                let c2 = 1.0 - b2.powi(self.step as i32);
                for (lr, rs) in &ranges {
                    let decay = 1.0 - lr * wd;
                    for r in rs {
                        for i in r.clone() {
                            let g = grads[i];
                            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                            let upd = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.adam_eps);
                            values[i] = values[i] * decay - lr * upd;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
