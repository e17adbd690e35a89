//! The full EM loop: initialization on a few clean samples, alternating
//! adaptive posterior sampling (E-step) and score refits (M-step), the
//! resume/reset phase rule, per-iteration metrics, and checkpointing.

use crate::checkpoint;
use crate::config::EmRunConfig;
use crate::data::{psnr, sliced_wasserstein};
use crate::error::{Error, Result};
use crate::net::MlpScoreNet;
use crate::ops::ObservationSet;
use crate::rng::{derive as derive_seed, stream};
use crate::sampler::{
    sample_posterior_batch, select_lambda, ChainOutcome, LambdaSearchResult, SamplerConfig,
};
use crate::schedule::NoiseSchedule;
use crate::score::{GaussianPrior, ScoreModel};
use crate::tensor::Tensor;
use crate::trainer::{init_train_on_clean, train_from, TrainReport};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Instant;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Resume,
    Reset,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Resume => write!(f, "resume"),
            Phase::Reset => write!(f, "reset"),
        }
    }
}

/// The lambda-based phase rule: switch to reset once the selected scale
/// drops below 1, or once it has failed to strictly decrease for more than
/// three consecutive iterations.
pub fn phase_transition_check(lambda_history: &[f32]) -> Phase {
    if let Some(last) = lambda_history.last() {
        if *last < 1.0 {
            return Phase::Reset;
        }
    }
    let mut non_decreasing_run = 0usize;
    for w in lambda_history.windows(2).rev() {
        if w[1] >= w[0] {
            non_decreasing_run += 1;
        } else {
            break;
        }
    }
    if non_decreasing_run >= 4 {
        Phase::Reset
    } else {
        Phase::Resume
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub phase: Phase,
    pub lambda_star: f32,
    pub mean_data_loss: f32,
    pub psnr_mean: Option<f32>,
    pub swd: Option<f32>,
    pub wall_clock_s: f64,
}

/// The checkpointable unit: model parameters with their EMA shadow plus the
/// run's trajectory.
#[derive(Clone, Debug)]
pub struct EMState {
    pub iteration: usize,
    pub phase: Phase,
    pub net: MlpScoreNet,
    pub ema: Vec<Tensor>,
    pub lambda_history: Vec<f32>,
    pub metrics: Vec<IterationMetrics>,
    pub seed: u64,
    pub config: EmRunConfig,
}

impl EMState {
    /// Evaluation-time model: live architecture with EMA weights.
    pub fn eval_model(&self) -> Result<ScoreModel> {
        let mut net = self.net.clone();
        net.set_params(&self.ema)?;
        Ok(ScoreModel::Neural(net))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    dim: usize,
    iteration: usize,
    phase: Phase,
    lambda_history: Vec<f32>,
    seed: u64,
    metrics: Vec<IterationMetrics>,
    config: EmRunConfig,
}

pub fn save_checkpoint(state: &EMState, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        dim: state.net.dim(),
        iteration: state.iteration,
        phase: state.phase,
        lambda_history: state.lambda_history.clone(),
        seed: state.seed,
        metrics: state.metrics.clone(),
        config: state.config.clone(),
    };
    let text = toml::to_string(&meta)
        .map_err(|e| Error::CorruptCheckpoint(format!("meta encode: {e}")))?;
    let mut arrays: Vec<(String, &[f32])> = Vec::new();
    for (name, t) in state.net.named_params() {
        arrays.push((name, t.data()));
    }
    for ((name, _), shadow) in state.net.named_params().into_iter().zip(&state.ema) {
        arrays.push((format!("ema_{name}"), shadow.data()));
    }
    checkpoint::write(path, &text, &arrays)
}

pub fn load_checkpoint(path: &Path) -> Result<EMState> {
    let data = checkpoint::read(path)?;
    let meta: CheckpointMeta = toml::from_str(&data.config_text)
        .map_err(|e| Error::CorruptCheckpoint(format!("meta parse: {e}")))?;
    meta.config.validate()?;
    let mut net = meta.config.model.build(meta.dim, meta.seed)?;
    let arrays: BTreeMap<String, Vec<f32>> = data.arrays.into_iter().collect();

    let mut params = Vec::new();
    let mut ema = Vec::new();
    for (name, current) in net.named_params() {
        let shape = current.shape().to_vec();
        let live = arrays
            .get(&name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing array '{name}'")))?;
        let shadow = arrays
            .get(&format!("ema_{name}"))
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing array 'ema_{name}'")))?;
        params.push(Tensor::new(shape.clone(), live.clone())?);
        ema.push(Tensor::new(shape, shadow.clone())?);
    }
    net.set_params(&params)?;
    Ok(EMState {
        iteration: meta.iteration,
        phase: meta.phase,
        net,
        ema,
        lambda_history: meta.lambda_history,
        metrics: meta.metrics,
        seed: meta.seed,
        config: meta.config,
    })
}

/// Result of one E-step over a subset of observations.
pub struct EStepOutcome {
    pub lambda: LambdaSearchResult,
    /// (observation index, reconstruction), converged chains only.
    pub reconstructions: Vec<(usize, Vec<f32>)>,
    pub mean_data_loss: f32,
    pub diverged: usize,
}

/// Select lambda on a small subset, then posterior-sample every observation
/// in `subset` once with the selected scale.
pub fn e_step(state: &EMState, observations: &ObservationSet, subset: &[usize]) -> Result<EStepOutcome> {
    if observations.is_empty() || subset.is_empty() {
        return Err(Error::InvalidArgument("E-step needs a nonempty observation subset".into()));
    }
    let cfg = &state.config;
    let schedule = cfg.schedule.build()?;
    let model = state.eval_model()?;
    let sigma = observations.items[subset[0]].sigma;
    let iter = (state.iteration + 1) as u64;

    let lambda_items: Vec<_> = subset
        .iter()
        .take(cfg.em.lambda_subset.min(subset.len()))
        .map(|&i| &observations.items[i])
        .collect();
    let base = SamplerConfig {
        lambda: 1.0,
        sigma,
        steps: cfg.sampler.steps,
        seed: derive_seed(state.seed, "em-lambda", iter),
    };
    let lambda = select_lambda(&model, &lambda_items, &schedule, &cfg.em.lambda_grid, &base)?;

    let items: Vec<_> = subset.iter().map(|&i| &observations.items[i]).collect();
    let sample_cfg = SamplerConfig {
        lambda: lambda.selected,
        sigma,
        steps: cfg.sampler.steps,
        seed: derive_seed(state.seed, "em-estep", iter),
    };
    let outcomes = sample_posterior_batch(&model, &items, &schedule, &sample_cfg)?;

    let mut reconstructions = Vec::with_capacity(subset.len());
    let mut total_loss = 0.0f64;
    let mut diverged = 0usize;
    for (&obs_idx, outcome) in subset.iter().zip(&outcomes) {
        match outcome {
            ChainOutcome::Converged(s) => {
                total_loss += s.data_loss as f64;
                reconstructions.push((obs_idx, s.x0.clone()));
            }
            ChainOutcome::Diverged { .. } => diverged += 1,
        }
    }
    let frac = diverged as f32 / subset.len() as f32;
    if diverged > 0 {
        eprintln!(
            "E-step {}: skipped {diverged}/{} diverged chain(s)",
            state.iteration + 1,
            subset.len()
        );
    }
    if frac > cfg.em.max_diverged_frac {
        return Err(Error::TooManyDiverged {
            frac: frac * 100.0,
            limit: cfg.em.max_diverged_frac * 100.0,
        });
    }
    if reconstructions.is_empty() {
        return Err(Error::AllCandidatesDiverged);
    }
    let mean_data_loss = (total_loss / reconstructions.len() as f64) as f32;
    Ok(EStepOutcome { lambda, reconstructions, mean_data_loss, diverged })
}

/// Refit the score model on reconstructions. Resume warm-starts from the
/// current parameters and EMA; reset reinitializes both and trains from
/// scratch under the (usually larger) reset budget.
pub fn m_step(state: &mut EMState, train_data: &Tensor, phase: Phase) -> Result<TrainReport> {
    let cfg = &state.config;
    let schedule = cfg.schedule.build()?;
    let iter = (state.iteration + 1) as u64;
    let spec = match phase {
        Phase::Resume => &cfg.trainer,
        Phase::Reset => cfg.reset_trainer(),
    };
    let mut tc = spec.to_train_config(cfg.model.dropout, derive_seed(state.seed, "em-mstep", iter));
    tc.batch_size = tc.batch_size.min(train_data.rows());
    let report = match phase {
        Phase::Resume => {
            let ema = state.ema.clone();
            train_from(&mut state.net, train_data, &schedule, &tc, Some(ema))?
        }
        Phase::Reset => {
            state.net = cfg
                .model
                .build(state.net.dim(), derive_seed(state.seed, "em-reset-init", iter))?;
            train_from(&mut state.net, train_data, &schedule, &tc, None)?
        }
    };
    state.ema = report.ema_params.clone();
    Ok(report)
}

/// Render metrics as the run's CSV. PSNR and SWD columns are empty when no
/// ground truth is available.
pub fn metrics_csv(metrics: &[IterationMetrics]) -> String {
    let mut out = String::from(
        "iteration,phase,lambda_star,mean_data_loss,psnr_mean,swd,wall_clock_s\n",
    );
    for m in metrics {
        let psnr = m.psnr_mean.map(|v| v.to_string()).unwrap_or_default();
        let swd = m.swd.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.3}\n",
            m.iteration, m.phase, m.lambda_star, m.mean_data_loss, psnr, swd, m.wall_clock_s
        ));
    }
    out
}

/// Train the initial model on a few clean samples and wrap it as the
/// iteration-0 state.
pub fn init_state(config: &EmRunConfig, init_clean: &Tensor) -> Result<(EMState, TrainReport)> {
    config.validate()?;
    if init_clean.rows() == 0 {
        return Err(Error::InvalidArgument("initialization needs at least one clean sample".into()));
    }
    let schedule = config.schedule.build()?;
    let d = init_clean.cols();
    let mut net = config.model.build(d, derive_seed(config.seed, "init-model", 0))?;
    let mut init_tc = config
        .init_trainer()
        .to_train_config(config.model.dropout, derive_seed(config.seed, "init-train", 0));
    init_tc.batch_size = init_tc.batch_size.min(init_clean.rows());
    let report = init_train_on_clean(&mut net, init_clean, &schedule, &init_tc)?;
    let state = EMState {
        iteration: 0,
        phase: Phase::Resume,
        ema: report.ema_params.clone(),
        net,
        lambda_history: Vec::new(),
        metrics: Vec::new(),
        seed: config.seed,
        config: config.clone(),
    };
    Ok((state, report))
}

/// Alternate E and M steps from an initialized state, checkpointing and
/// rewriting the metrics CSV every iteration when `out_dir` is given.
pub fn run_em_from(
    mut state: EMState,
    observations: &ObservationSet,
    out_dir: Option<&Path>,
) -> Result<EMState> {
    state.config.validate()?;
    if observations.is_empty() {
        return Err(Error::InvalidArgument("run_em needs observations".into()));
    }
    let d = observations.signal_dim();
    if state.net.dim() != d {
        return Err(Error::ShapeMismatch {
            op: "run_em",
            detail: format!("model dim {} vs observation dim {d}", state.net.dim()),
        });
    }

    let n = observations.len();
    let mut accumulated: BTreeMap<usize, Vec<f32>> = BTreeMap::new();

    for iter in state.iteration + 1..=state.config.em.iterations {
        let started = Instant::now();
        let result = run_iteration(&mut state, observations, &mut accumulated, n, iter, started);
        match result {
            Ok((metrics, train_report)) => {
                state.metrics.push(metrics);
                state.iteration = iter;
                if let Some(dir) = out_dir {
                    save_checkpoint(&state, &dir.join(format!("checkpoints/iter_{iter:03}.ckpt")))?;
                    std::fs::write(dir.join("metrics.csv"), metrics_csv(&state.metrics))?;
                    let loss_dir = dir.join("loss");
                    std::fs::create_dir_all(&loss_dir)?;
                    let mut csv = String::from("epoch,mean_loss\n");
                    for (e, l) in train_report.epoch_loss.iter().enumerate() {
                        csv.push_str(&format!("{},{}\n", e + 1, l));
                    }
                    std::fs::write(loss_dir.join(format!("iter_{iter:03}.csv")), csv)?;
                }
            }
            Err(e) => {
                // keep the last consistent state reachable before surfacing
                if let Some(dir) = out_dir {
                    let _ = save_checkpoint(&state, &dir.join("checkpoints/abort.ckpt"));
                }
                return Err(e);
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&state, &dir.join("checkpoints/final.ckpt"))?;
        std::fs::write(dir.join("metrics.csv"), metrics_csv(&state.metrics))?;
    }
    Ok(state)
}

/// Initialize on clean data, then alternate E and M steps with the phase
/// rule; the composition of [`init_state`] and [`run_em_from`].
pub fn run_em(
    config: &EmRunConfig,
    observations: &ObservationSet,
    init_clean: &Tensor,
    out_dir: Option<&Path>,
) -> Result<EMState> {
    if observations.is_empty() {
        return Err(Error::InvalidArgument("run_em needs observations".into()));
    }
    if init_clean.cols() != observations.signal_dim() {
        return Err(Error::ShapeMismatch {
            op: "run_em",
            detail: format!(
                "clean data dim {} vs observation dim {}",
                init_clean.cols(),
                observations.signal_dim()
            ),
        });
    }
    let (state, _) = init_state(config, init_clean)?;
    run_em_from(state, observations, out_dir)
}

fn run_iteration(
    state: &mut EMState,
    observations: &ObservationSet,
    accumulated: &mut BTreeMap<usize, Vec<f32>>,
    n: usize,
    iter: usize,
    started: Instant,
) -> Result<(IterationMetrics, TrainReport)> {
    let cfg_em = state.config.em.clone();

    // the phase in effect for this whole iteration; a transition fired by
    // this iteration's lambda* takes effect from the next one, so a reset
    // refit only ever sees reconstructions re-sampled by the current model
    let phase = state.phase;

    // resume: fresh random subset; reset: re-sample everything touched so far
    let subset: Vec<usize> = if phase == Phase::Reset {
        accumulated.keys().copied().collect()
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream(state.seed, "em-subset", iter as u64));
        idx.truncate(cfg_em.subset.min(n));
        idx
    };

    let outcome = e_step(state, observations, &subset)?;
    state.lambda_history.push(outcome.lambda.selected);

    for (idx, recon) in &outcome.reconstructions {
        accumulated.insert(*idx, recon.clone());
    }

    let d = state.net.dim();
    let train_rows: Vec<(usize, &Vec<f32>)> = if phase == Phase::Reset {
        accumulated.iter().map(|(i, r)| (*i, r)).collect()
    } else {
        outcome.reconstructions.iter().map(|(i, r)| (*i, r)).collect()
    };
    let mut flat = Vec::with_capacity(train_rows.len() * d);
    for (_, r) in &train_rows {
        flat.extend_from_slice(r);
    }
    let train_data = Tensor::from_parts(vec![train_rows.len(), d], flat);

    let train_report = m_step(state, &train_data, phase)?;

    state.phase = next_phase(
        phase,
        &state.lambda_history,
        cfg_em.phase_switch_iteration,
        iter + 1,
    );

    let (psnr_mean, swd) = match &observations.ground_truth {
        Some(truth) => {
            let mut total = 0.0f64;
            let mut count = 0usize;
            for (idx, recon) in &outcome.reconstructions {
                let p = psnr(recon, truth.row(*idx), 1.0)?;
                if p.is_finite() {
                    total += p as f64;
                    count += 1;
                }
            }
            let recon_mat = {
                let mut flat = Vec::with_capacity(outcome.reconstructions.len() * d);
                for (_, r) in &outcome.reconstructions {
                    flat.extend_from_slice(r);
                }
                Tensor::from_parts(vec![outcome.reconstructions.len(), d], flat)
            };
            let swd = sliced_wasserstein(
                &recon_mat,
                truth,
                128,
                derive_seed(state.seed, "em-swd", iter as u64),
            )?;
            (if count > 0 { Some((total / count as f64) as f32) } else { None }, Some(swd))
        }
        None => (None, None),
    };

    Ok((
        IterationMetrics {
            iteration: iter,
            phase,
            lambda_star: outcome.lambda.selected,
            mean_data_loss: outcome.mean_data_loss,
            psnr_mean,
            swd,
            wall_clock_s: started.elapsed().as_secs_f64(),
        },
        train_report,
    ))
}

/// Sticky phase update with the optional fixed-iteration override;
/// `next_iteration` is the iteration the returned phase will govern.
fn next_phase(
    current: Phase,
    lambda_history: &[f32],
    switch_at: Option<usize>,
    next_iteration: usize,
) -> Phase {
    if current == Phase::Reset {
        return Phase::Reset;
    }
    match switch_at {
        Some(k) => {
            if next_iteration >= k {
                Phase::Reset
            } else {
                Phase::Resume
            }
        }
        None => phase_transition_check(lambda_history),
    }
}

/// EM identifiability oracle: the score model constrained to an isotropic
/// Gaussian with a moment-matching M-step, run on y = x + sigma n. The
/// stochastic-EM fixed point of this loop is the deconvolution MLE
/// var(y) - sigma^2, which the acceptance suite checks.
pub struct GaussianEmReport {
    pub mean_history: Vec<f64>,
    pub var_history: Vec<f64>,
}

pub fn gaussian_em_deconvolve(
    ys: &[f32],
    sigma: f32,
    schedule: &NoiseSchedule,
    iterations: usize,
    seed: u64,
) -> Result<GaussianEmReport> {
    if ys.is_empty() {
        return Err(Error::InvalidArgument("gaussian EM needs observations".into()));
    }
    let op = crate::ops::ForwardOperator::identity(&[1]);
    let observations: Vec<crate::ops::Observation> = ys
        .iter()
        .map(|&y| crate::ops::Observation { y: vec![y], op: op.clone(), sigma })
        .collect();
    let refs: Vec<_> = observations.iter().collect();

    // deliberately poor start
    let mut mean = 0.0f64;
    let mut var = 0.25f64;
    let mut mean_history = vec![mean];
    let mut var_history = vec![var];
    for it in 0..iterations {
        let prior = GaussianPrior::new(vec![mean as f32], vec![var.max(1e-4) as f32])?;
        let model = ScoreModel::Gaussian(prior);
        let cfg = SamplerConfig {
            lambda: 1.0,
            sigma,
            steps: None,
            seed: derive_seed(seed, "gauss-em", it as u64),
        };
        let outcomes = sample_posterior_batch(&model, &refs, schedule, &cfg)?;
        let draws: Vec<f64> = outcomes
            .iter()
            .filter_map(|o| o.converged().map(|s| s.x0[0] as f64))
            .collect();
        if draws.is_empty() {
            return Err(Error::AllCandidatesDiverged);
        }
        let n = draws.len() as f64;
        mean = draws.iter().sum::<f64>() / n;
        var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        mean_history.push(mean);
        var_history.push(var);
    }
    Ok(GaussianEmReport { mean_history, var_history })
}
