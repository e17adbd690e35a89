//! Denoising score matching: the per-batch objective and the training loop
//! with AdamW and parameter EMA.
//!
//! Each item draws its own uniform timestep and Gaussian noise; the loss is
//! the mean over the batch of ||eps + net(sqrt(abar) x0 + sqrt(1-abar) eps, t)||^2,
//! so the trained network predicts the negated noise and the score is
//! net(x,t)/sqrt(1-abar).

use crate::error::{Error, Result};
use crate::net::MlpScoreNet;
use crate::optim::{EmaState, OptimizerState};
use crate::rng::stream;
use crate::schedule::NoiseSchedule;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::time::{Duration, Instant};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub ema_decay: f32,
    pub dropout: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 1e-4,
            ema_decay: 0.999,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self, n_items: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 || self.batch_size > n_items {
            return Err(Error::InvalidArgument(format!(
                "batch size {} must be in 1..={} (dataset size)",
                self.batch_size, n_items
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout must be in [0,1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epoch_loss: Vec<f32>,
    /// EMA shadow parameters at the end of training, in params() order.
    pub ema_params: Vec<Tensor>,
    pub wall_clock: Duration,
}

/// Per-item timesteps and noise for one DSM batch.
pub(crate) fn make_dsm_batch(
    x0: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Vec<usize>, Tensor) {
    let (n, d) = (x0.rows(), x0.cols());
    let t_max = schedule.len();
    let mut noisy = Vec::with_capacity(n * d);
    let mut eps_all = Vec::with_capacity(n * d);
    let mut ts = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.random_range(1..=t_max);
        let (ca, ce) = schedule.diffusion_coeffs(t).expect("t sampled in range");
        ts.push(t);
        for &x in x0.row(i) {
            let e: f32 = rng.sample(rand_distr::StandardNormal);
            eps_all.push(e);
            noisy.push(ca * x + ce * e);
        }
    }
    (
        Tensor::from_parts(vec![n, d], noisy),
        ts,
        Tensor::from_parts(vec![n, d], eps_all),
    )
}

/// Mean over rows of the squared eps-scale residual ||eps + out||^2.
pub(crate) fn eps_residual_loss(out: &Tensor, eps: &Tensor) -> f32 {
    let n = out.rows();
    let mut total = 0.0f64;
    for (o, e) in out.data().iter().zip(eps.data()) {
        let r = o + e;
        total += (r as f64) * (r as f64);
    }
    (total / n as f64) as f32
}

/// Forward-only DSM loss on one batch, drawing t and eps from `rng`.
pub fn dsm_loss(
    net: &MlpScoreNet,
    x0_batch: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f32> {
    if x0_batch.rows() == 0 {
        return Err(Error::InvalidArgument("dsm_loss needs a nonempty batch".into()));
    }
    let (noisy, ts, eps) = make_dsm_batch(x0_batch, schedule, rng);
    let out = net.forward(&noisy, &ts)?;
    Ok(eps_residual_loss(&out, &eps))
}

/// DSM loss and its parameter gradients on one batch, drawing t and eps
/// from `rng`; the gradient side of [`dsm_loss`].
pub fn dsm_loss_grads(
    net: &MlpScoreNet,
    x0_batch: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(f32, Vec<Tensor>)> {
    if x0_batch.rows() == 0 {
        return Err(Error::InvalidArgument("dsm_loss needs a nonempty batch".into()));
    }
    dsm_loss_grad(net, x0_batch, schedule, rng, None, 0.0)
}

/// DSM loss with gradients for every parameter, in params() order.
fn dsm_loss_grad(
    net: &MlpScoreNet,
    x0_batch: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    dropout_rng: Option<&mut ChaCha8Rng>,
    dropout: f32,
) -> Result<(f32, Vec<Tensor>)> {
    let n = x0_batch.rows();
    let (noisy, ts, eps) = make_dsm_batch(x0_batch, schedule, rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(noisy);
    let drop = dropout_rng.map(|r| (dropout, r));
    let fwd = net.forward_tape(&mut tape, xv, &ts, drop)?;
    let ev = tape.leaf(eps);
    let resid = tape.add(fwd.out, ev)?;
    let sq = tape.mul(resid, resid)?;
    let total = tape.sum_all(sq)?;
    let loss = tape.scale(total, 1.0 / n as f32)?;
    let loss_val = tape.value(loss).item();
    tape.backward(loss)?;
    let grads: Vec<Tensor> = fwd
        .param_vars
        .iter()
        .map(|&v| tape.take_grad(v).expect("every parameter is on the loss path"))
        .collect();
    Ok((loss_val, grads))
}

/// Shuffled-minibatch training with an AdamW step and EMA update per batch.
/// The network keeps its live parameters; the EMA shadow is returned in the
/// report for evaluation-time use.
pub fn train(
    net: &mut MlpScoreNet,
    data: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_from(net, data, schedule, cfg, None)
}

/// `train` with an optional EMA shadow carried over from earlier training,
/// for warm-started refits.
pub fn train_from(
    net: &mut MlpScoreNet,
    data: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    initial_ema: Option<Vec<Tensor>>,
) -> Result<TrainReport> {
    cfg.validate(data.rows())?;
    let started = Instant::now();
    let n = data.rows();
    let d = data.cols();
    if d != net.dim() {
        return Err(Error::ShapeMismatch {
            op: "train",
            detail: format!("data dim {d} vs network dim {}", net.dim()),
        });
    }

    let mut opt = OptimizerState::new(&net.params(), cfg.lr, cfg.weight_decay)?;
    let mut ema = match initial_ema {
        Some(shadow) => EmaState::with_shadow(cfg.ema_decay, shadow)?,
        None => EmaState::new(cfg.ema_decay, &net.params())?,
    };
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(cfg.seed, "train-shuffle", epoch as u64));
        let mut noise_rng = stream(cfg.seed, "train-noise", epoch as u64);
        let mut dropout_rng = stream(cfg.seed, "train-dropout", epoch as u64);

        let mut total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                batch.extend_from_slice(data.row(i));
            }
            let batch = Tensor::from_parts(vec![chunk.len(), d], batch);
            let use_dropout = cfg.dropout > 0.0;
            let (loss, grads) = dsm_loss_grad(
                net,
                &batch,
                schedule,
                &mut noise_rng,
                use_dropout.then_some(&mut dropout_rng),
                cfg.dropout,
            )
            .map_err(|e| Error::TrainingDiverged { epoch, detail: e.to_string() })?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    detail: format!("loss {loss}"),
                });
            }
            total += loss as f64 * chunk.len() as f64;
            opt.step(&mut net.params_mut(), &grads)?;
            ema.update(&net.params())?;
        }
        epoch_loss.push((total / n as f64) as f32);
    }

    Ok(TrainReport {
        epoch_loss,
        ema_params: ema.shadow().to_vec(),
        wall_clock: started.elapsed(),
    })
}

/// Initial model fit on a small clean set; same procedure as `train` with a
/// nonempty-set precondition. Intended for tens to hundreds of samples.
pub fn init_train_on_clean(
    net: &mut MlpScoreNet,
    few_clean: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if few_clean.rows() == 0 {
        return Err(Error::InvalidArgument("initial training needs at least one clean sample".into()));
    }
    let mut cfg = cfg.clone();
    cfg.batch_size = cfg.batch_size.min(few_clean.rows());
    train(net, few_clean, schedule, &cfg)
}
