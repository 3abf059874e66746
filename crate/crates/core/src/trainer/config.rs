use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::eval::ProbeSettings;
use crate::losses::{LossSettings, LossTermMask};
use crate::nn::{AdamConfig, Architecture};
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder hidden widths; the last one is the feature width.
    pub encoder_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_hidden: vec![64, 64],
            disc_hidden: vec![64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub ema_momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        OptimConfig {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            ema_momentum: 0.998,
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub iterations: u64,
    /// Rows per domain per minibatch.
    pub batch_size: usize,
    pub eval_interval: u64,
    /// Discriminator updates per encoder update.
    pub disc_steps: usize,
    pub refine_iterations: u64,
    /// Refinement iterations between teacher refreshes.
    pub refinement_interval: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            iterations: 4000,
            batch_size: 64,
            eval_interval: 500,
            disc_steps: 1,
            refine_iterations: 1000,
            refinement_interval: 500,
        }
    }
}

/// Everything that determines a run. Sections map one to one onto the
/// tables of the config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: TaskSpec,
    pub model: ModelConfig,
    pub losses: LossSettings,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub probe: ProbeSettings,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.losses.validate()?;
        self.probe.validate()?;
        self.architecture()
            .map_err(|e| Error::Config(format!("model: {e}")))?;
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("optim.lr must be positive, got {}", o.lr)));
        }
        for (name, v) in [("beta1", o.beta1), ("beta2", o.beta2), ("ema_momentum", o.ema_momentum)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("optim.{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(o.eps > 0.0) {
            return Err(Error::Config(format!("optim.eps must be positive, got {}", o.eps)));
        }
        let s = &self.schedule;
        if s.batch_size < 2 {
            return Err(Error::Config(format!("schedule.batch_size must be at least 2, got {}", s.batch_size)));
        }
        if s.eval_interval == 0 {
            return Err(Error::Config("schedule.eval_interval must be at least 1".into()));
        }
        if s.disc_steps == 0 {
            return Err(Error::Config("schedule.disc_steps must be at least 1".into()));
        }
        if s.refinement_interval == 0 {
            return Err(Error::Config("schedule.refinement_interval must be at least 1".into()));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(
            self.data.input_dim(),
            &self.model.encoder_hidden,
            self.data.classes,
            &self.model.disc_hidden,
        )
    }

    /// The task with its seed resolved: an explicit `data.seed` wins,
    /// otherwise it is derived from the experiment seed.
    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            seed: Some(self.data.seed.unwrap_or_else(|| derive_seed(self.seed, "data"))),
            ..self.data.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ExperimentConfig { seed, ..self.clone() }
    }

    pub fn with_mask(&self, mask: LossTermMask) -> Self {
        let mut c = self.clone();
        c.losses.set_mask(mask);
        c
    }

    /// Plain supervised training on the source: every regularizer and the
    /// domain term switched off.
    pub fn source_only(&self) -> Self {
        let mut c = self.clone();
        c.losses.lambda_d = 0.0;
        c.losses.lambda_s = 0.0;
        c.losses.lambda_t = 0.0;
        c.losses.set_mask(LossTermMask {
            site: c.losses.site,
            ..LossTermMask::none()
        });
        c
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
