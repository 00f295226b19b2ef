use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{config, Result};
use crate::losses::LossConfig;
use crate::model::check_compatible;
use crate::sinkhorn::SinkhornConfig;
use crate::synth::{SplitFractions, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    /// Learning rate at step 0, ramped linearly to `base_lr`.
    pub init_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub n_prototypes: usize,
    /// Zero prototype gradients for the first `freeze_fraction` of the
    /// warmup steps.
    pub freeze_prototypes: bool,
    pub freeze_fraction: f64,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            base_lr: 1e-3,
            init_lr: 1e-8,
            weight_decay: 0.05,
            warmup_epochs: 3,
            seed: 1,
            n_prototypes: 16,
            freeze_prototypes: true,
            freeze_fraction: 0.3,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(config("batch_size must be at least 2"));
        }
        if self.n_prototypes < 2 {
            return Err(config("n_prototypes must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(config("epochs must be at least 1"));
        }
        if !(self.base_lr >= 0.0) || !(self.init_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(config("learning rates and weight decay must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.freeze_fraction) {
            return Err(config("freeze_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub probe_steps: usize,
    pub probe_lr: f64,
    /// Random relabelings used to estimate chance-level NMI and purity.
    pub chance_trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe_steps: 500,
            probe_lr: 0.1,
            chance_trials: 50,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.probe_lr > 0.0) || !self.probe_lr.is_finite() {
            return Err(config("probe_lr must be positive and finite"));
        }
        Ok(())
    }
}

/// Every tunable of a run, serialized as one config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub split: SplitFractions,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub sinkhorn: SinkhornConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.split.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.sinkhorn.validate()?;
        self.eval.validate()?;
        check_compatible(&self.encoder, &self.data)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config(format!("config echo: {e}")))
    }
}
