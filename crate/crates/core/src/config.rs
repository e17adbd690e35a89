//! Configuration types shared by the orchestrator, checkpoints, and the CLI.
//! All fields have defaults so TOML files only state what they change, and
//! `validate` runs before any compute or file output.

use crate::error::{Error, Result};
use crate::net::{Activation, MlpScoreNet};
use crate::schedule::NoiseSchedule;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub t_steps: usize,
    pub beta1: f64,
    pub beta_t: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { t_steps: 1000, beta1: 1e-4, beta_t: 0.02 }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_steps, self.beta1, self.beta_t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub time_embed: usize,
    pub activation: Activation,
    pub dropout: f32,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { hidden: vec![128, 128], time_embed: 16, activation: Activation::Silu, dropout: 0.0 }
    }
}

impl ModelSpec {
    pub fn build(&self, dim: usize, seed: u64) -> Result<MlpScoreNet> {
        MlpScoreNet::new(dim, &self.hidden, self.time_embed, self.activation, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub ema_decay: f32,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self { epochs: 300, batch_size: 128, lr: 1e-3, weight_decay: 1e-4, ema_decay: 0.999 }
    }
}

impl TrainSpec {
    pub fn to_train_config(&self, dropout: f32, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            ema_decay: self.ema_decay,
            dropout,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSpec {
    /// Number of EM iterations (N).
    pub iterations: usize,
    /// Observations posterior-sampled per resume-phase iteration.
    pub subset: usize,
    pub lambda_grid: Vec<f32>,
    /// Observations used for the lambda search.
    pub lambda_subset: usize,
    /// Force the reset phase from this iteration on, instead of the
    /// lambda-based rule.
    pub phase_switch_iteration: Option<usize>,
    /// Abort an E-step if more than this fraction of chains diverge.
    pub max_diverged_frac: f32,
}

impl Default for EmSpec {
    fn default() -> Self {
        Self {
            iterations: 10,
            subset: 800,
            lambda_grid: vec![0.5, 1.0, 2.0, 5.0, 10.0, 20.0],
            lambda_subset: 32,
            phase_switch_iteration: None,
            max_diverged_frac: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSpec {
    /// Reverse-chain start time; None runs the full schedule.
    pub steps: Option<usize>,
}

/// Everything the EM orchestrator needs, independent of where the data and
/// observations come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EmRunConfig {
    pub seed: u64,
    pub schedule: ScheduleSpec,
    pub model: ModelSpec,
    pub trainer: TrainSpec,
    /// Budget for the initial fit on clean data; defaults to `trainer`.
    pub init_trainer: Option<TrainSpec>,
    /// Budget for reset-phase refits from scratch; defaults to `trainer`.
    pub reset_trainer: Option<TrainSpec>,
    pub em: EmSpec,
    pub sampler: SamplerSpec,
}

impl EmRunConfig {
    pub fn init_trainer(&self) -> &TrainSpec {
        self.init_trainer.as_ref().unwrap_or(&self.trainer)
    }

    pub fn reset_trainer(&self) -> &TrainSpec {
        self.reset_trainer.as_ref().unwrap_or(&self.trainer)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.t_steps == 0 || !(0.0 < s.beta1 && s.beta1 <= s.beta_t && s.beta_t < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "schedule: need t_steps >= 1 and 0 < beta1 <= beta_t < 1, got T={} beta1={} betaT={}",
                s.t_steps, s.beta1, s.beta_t
            )));
        }
        if self.model.time_embed == 0 || self.model.time_embed % 2 != 0 {
            return Err(Error::InvalidArgument("model.time_embed must be positive and even".into()));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::InvalidArgument("model.dropout must be in [0,1)".into()));
        }
        for (label, t) in [("trainer", &self.trainer)]
            .into_iter()
            .chain(self.init_trainer.iter().map(|t| ("init_trainer", t)))
            .chain(self.reset_trainer.iter().map(|t| ("reset_trainer", t)))
        {
            if t.epochs == 0 || t.batch_size == 0 {
                return Err(Error::InvalidArgument(format!(
                    "{label}: epochs and batch_size must be >= 1"
                )));
            }
            if t.lr <= 0.0 || !t.lr.is_finite() {
                return Err(Error::InvalidArgument(format!("{label}: lr must be positive")));
            }
            if t.weight_decay < 0.0 {
                return Err(Error::InvalidArgument(format!("{label}: weight_decay must be >= 0")));
            }
            if !(0.0 < t.ema_decay && t.ema_decay < 1.0) {
                return Err(Error::InvalidArgument(format!("{label}: ema_decay must be in (0,1)")));
            }
        }
        let em = &self.em;
        if em.subset == 0 || em.lambda_subset == 0 {
            return Err(Error::InvalidArgument("em.subset and em.lambda_subset must be >= 1".into()));
        }
        if em.lambda_grid.is_empty()
            || em.lambda_grid.iter().any(|l| !l.is_finite() || *l < 0.0)
        {
            return Err(Error::InvalidArgument(
                "em.lambda_grid must be nonempty, finite, and >= 0".into(),
            ));
        }
        let mut sorted = em.lambda_grid.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("em.lambda_grid values must be distinct".into()));
        }
        if !(0.0..=1.0).contains(&em.max_diverged_frac) {
            return Err(Error::InvalidArgument("em.max_diverged_frac must be in [0,1]".into()));
        }
        if let Some(steps) = self.sampler.steps {
            if steps == 0 || steps > s.t_steps {
                return Err(Error::InvalidArgument(format!(
                    "sampler.steps must be in 1..={}",
                    s.t_steps
                )));
            }
        }
        Ok(())
    }
}
