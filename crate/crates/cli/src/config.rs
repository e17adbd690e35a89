//! Run configuration: one TOML file per run, merged with CLI overrides and
//! echoed into the run directory. Validation happens before any output is
//! written.

use anyhow::{bail, Context};
use emdiff::config::{EmRunConfig, EmSpec, ModelSpec, SamplerSpec, ScheduleSpec, TrainSpec};
use emdiff::data::ShapeFamily;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const OUT_ROOT_ENV: &str = "EMDIFF_OUT_ROOT";

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Inpaint,
    Denoise,
    Deblur,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Toyimage,
    Gmm2d,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub task: Task,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { task: Task::Inpaint, seed: 0, out_dir: PathBuf::from("run") }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub family: ShapeFamily,
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    pub n_init: usize,
    pub n_test: usize,
    /// gmm2d: the two component means sit at (-sep, 0) and (sep, 0).
    pub gmm_separation: f32,
    pub gmm_var: f32,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Toyimage,
            family: ShapeFamily::Blobs,
            height: 8,
            width: 8,
            n_train: 5000,
            n_init: 50,
            n_test: 250,
            gmm_separation: 1.5,
            gmm_var: 0.3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorSection {
    /// Inpainting: per-pixel keep probability (0.4 keeps 40% of pixels).
    pub keep_prob: f32,
    /// Observation noise std; None picks the task default
    /// (0.2 denoise, 0.01 inpaint/deblur).
    pub sigma: Option<f32>,
    pub kernel_size: usize,
    pub sigma_blur: f64,
}

impl Default for OperatorSection {
    fn default() -> Self {
        Self { keep_prob: 0.4, sigma: None, kernel_size: 9, sigma_blur: 2.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub operator: OperatorSection,
    pub schedule: ScheduleSpec,
    pub model: ModelSpec,
    pub trainer: TrainSpec,
    pub init_trainer: Option<TrainSpec>,
    pub reset_trainer: Option<TrainSpec>,
    pub em: EmSpec,
    pub sampler: SamplerSpec,
}

/// Flag overrides applied on top of the config file.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Root RNG seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run output directory (relative paths resolve under $EMDIFF_OUT_ROOT)
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Number of EM iterations
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Diffusion timesteps
    #[arg(long)]
    pub t_steps: Option<usize>,
    /// Observations posterior-sampled per EM iteration
    #[arg(long)]
    pub subset: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(seed) = overrides.seed {
            cfg.run.seed = seed;
        }
        if let Some(dir) = &overrides.out_dir {
            cfg.run.out_dir = dir.clone();
        }
        if let Some(iters) = overrides.iterations {
            cfg.em.iterations = iters;
        }
        if let Some(t) = overrides.t_steps {
            cfg.schedule.t_steps = t;
        }
        if let Some(s) = overrides.subset {
            cfg.em.subset = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.core().validate()?;
        let d = &self.dataset;
        if d.kind == DatasetKind::Toyimage && (d.height < 4 || d.width < 4) {
            bail!("dataset: toy images need height and width >= 4");
        }
        if d.n_train == 0 || d.n_init == 0 {
            bail!("dataset: n_train and n_init must be >= 1");
        }
        if d.kind == DatasetKind::Gmm2d && d.gmm_var <= 0.0 {
            bail!("dataset: gmm_var must be positive");
        }
        let o = &self.operator;
        if !(o.keep_prob > 0.0 && o.keep_prob <= 1.0) {
            bail!("operator: keep_prob must be in (0, 1]");
        }
        if let Some(s) = o.sigma {
            if s <= 0.0 {
                bail!("operator: sigma must be positive (the likelihood needs sigma > 0)");
            }
        }
        if o.kernel_size % 2 == 0 || o.kernel_size == 0 {
            bail!("operator: kernel_size must be odd");
        }
        if o.sigma_blur <= 0.0 {
            bail!("operator: sigma_blur must be positive");
        }
        Ok(())
    }

    /// The orchestrator-facing slice of this config.
    pub fn core(&self) -> EmRunConfig {
        EmRunConfig {
            seed: self.run.seed,
            schedule: self.schedule.clone(),
            model: self.model.clone(),
            trainer: self.trainer.clone(),
            init_trainer: self.init_trainer.clone(),
            reset_trainer: self.reset_trainer.clone(),
            em: self.em.clone(),
            sampler: self.sampler.clone(),
        }
    }

    /// Observation noise std for the configured task.
    pub fn obs_sigma(&self) -> f32 {
        self.operator.sigma.unwrap_or(match self.run.task {
            Task::Denoise => 0.2,
            Task::Inpaint | Task::Deblur => 0.01,
        })
    }

    /// Resolve the run directory against $EMDIFF_OUT_ROOT.
    pub fn run_dir(&self) -> PathBuf {
        if self.run.out_dir.is_absolute() {
            return self.run.out_dir.clone();
        }
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(&self.run.out_dir),
            None => self.run.out_dir.clone(),
        }
    }

    /// Echo the effective merged config into the run directory.
    pub fn echo(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = toml::to_string(self).context("encoding merged config")?;
        std::fs::write(dir.join("config.toml"), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.run.seed, cfg.run.seed);
    }

    #[test]
    fn task_defaults_for_sigma() {
        let mut cfg = RunConfig::default();
        cfg.run.task = Task::Denoise;
        assert_eq!(cfg.obs_sigma(), 0.2);
        cfg.run.task = Task::Inpaint;
        assert_eq!(cfg.obs_sigma(), 0.01);
        cfg.operator.sigma = Some(0.05);
        assert_eq!(cfg.obs_sigma(), 0.05);
    }

    #[test]
    fn bad_values_rejected() {
        let mut cfg = RunConfig::default();
        cfg.operator.keep_prob = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.operator.kernel_size = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.em.lambda_grid = vec![];
        assert!(cfg.validate().is_err());
    }
}
