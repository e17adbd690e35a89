//! Reverse-time sampling: unconditional ancestral chains, Tweedie
//! posterior-mean estimates, posterior sampling with a likelihood-weighted
//! data term, and automated selection of the likelihood scale.
//!
//! The reverse update is
//!   x_{t-1} = x_t + beta_t [ x_t/2 + score + lambda * likelihood_score ] + sqrt(beta_t) z
//! with z forced to zero on the final step. The likelihood term weights the
//! data residual by 1/(sigma^2 + (1 - abar_t)), the observation variance
//! implied by the posterior spread of x0 given x_t; it converges to the
//! 1/sigma^2 weighting as t -> 0 and is what makes the chain reproduce
//! conjugate-Gaussian posteriors (the oracle this module is verified
//! against).

use crate::error::{Error, Result};
use crate::ops::{data_loss, ForwardOperator, Observation};
use crate::rng::stream;
use crate::schedule::NoiseSchedule;
use crate::score::{ScoreModel, TweedieEval};
use crate::tensor::Tensor;
use rayon::prelude::*;

/// State norm beyond which a chain is declared divergent.
pub const DIVERGENCE_NORM: f32 = 1e6;

#[derive(Clone, Debug)]
pub struct SamplerConfig {
    /// Likelihood scale (0 = unconditional).
    pub lambda: f32,
    /// Observation noise std; must be positive for posterior sampling.
    pub sigma: f32,
    /// Chain start time; defaults to the schedule length.
    pub steps: Option<usize>,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn unconditional(seed: u64) -> Self {
        Self { lambda: 0.0, sigma: 1.0, steps: None, seed }
    }

    pub fn posterior(lambda: f32, sigma: f32, seed: u64) -> Self {
        Self { lambda, sigma, steps: None, seed }
    }

    fn start_t(&self, schedule: &NoiseSchedule) -> usize {
        self.steps.map_or(schedule.len(), |s| s.min(schedule.len()))
    }

    fn validate(&self, posterior: bool) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if posterior && self.sigma <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "posterior sampling needs sigma > 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Final chain state with its terminal data-consistency loss.
#[derive(Clone, Debug)]
pub struct PosteriorSample {
    pub x0: Vec<f32>,
    pub data_loss: f32,
}

#[derive(Clone, Debug)]
pub enum ChainOutcome {
    Converged(PosteriorSample),
    Diverged { t: usize, norm: f32 },
}

impl ChainOutcome {
    pub fn converged(&self) -> Option<&PosteriorSample> {
        match self {
            ChainOutcome::Converged(s) => Some(s),
            ChainOutcome::Diverged { .. } => None,
        }
    }
}

/// Tweedie posterior-mean estimate x0_hat = (x_t + (1-abar_t) s) / sqrt(abar_t).
pub fn tweedie_x0(
    model: &ScoreModel,
    x_t: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let score = model.eval_score(x_t, t, schedule)?;
    Ok(crate::score::tweedie_combine(x_t, &score, schedule.alpha_bar(t)))
}

/// Time-aware observation variance for the likelihood gradient.
fn sigma_t_sq(sigma: f32, alpha_bar: f32) -> f32 {
    sigma * sigma + (1.0 - alpha_bar)
}

/// Gradient of the log-likelihood approximation at x_t for one observation:
/// -1/(2 sigma_t^2) * grad ||y - A(x0_hat(x_t))||^2, with the exact VJP
/// through x0_hat (network Jacobian included).
pub fn posterior_likelihood_score(
    model: &ScoreModel,
    x_t: &Tensor,
    t: usize,
    y: &[f32],
    op: &ForwardOperator,
    sigma: f32,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let eval = model.tweedie_vjp(x_t, t, schedule)?;
    likelihood_from_eval(eval, x_t.rows(), &[(y, op)], sigma, schedule.alpha_bar(t))
        .map(|(ell, _)| ell)
}

/// Shared likelihood assembly: residuals per item, adjoint back to signal
/// space, scale by 1/sigma_t^2, then the VJP through x0_hat.
/// Items must align with rows of the batch state.
fn likelihood_from_eval(
    eval: TweedieEval,
    n: usize,
    items: &[(&[f32], &ForwardOperator)],
    sigma: f32,
    alpha_bar: f32,
) -> Result<(Tensor, Tensor)> {
    if items.len() != n {
        return Err(Error::ShapeMismatch {
            op: "likelihood_score",
            detail: format!("{} observations for {} chain rows", items.len(), n),
        });
    }
    let d = eval.x0_hat.cols();
    let w = 1.0 / sigma_t_sq(sigma, alpha_bar);
    let mut seed = vec![0.0f32; n * d];
    for (i, (y, op)) in items.iter().enumerate() {
        let ax = op.apply(eval.x0_hat.row(i))?;
        if ax.len() != y.len() {
            return Err(Error::ShapeMismatch {
                op: "likelihood_score",
                detail: format!("y len {} vs A(x) len {}", y.len(), ax.len()),
            });
        }
        let r: Vec<f32> = y.iter().zip(&ax).map(|(a, b)| a - b).collect();
        let back = op.adjoint(&r)?;
        for (j, v) in back.iter().enumerate() {
            seed[i * d + j] = w * v;
        }
    }
    let score = eval.score;
    let ell = eval.vjp.apply(&Tensor::from_parts(vec![n, d], seed))?;
    if !ell.is_finite() {
        return Err(Error::NonFinite { op: "likelihood_score" });
    }
    Ok((ell, score))
}

/// One reverse step. `obs` carries per-row observations; pass None (or
/// lambda = 0) for the unconditional chain. `z` is the injected noise,
/// zero on the last step by convention.
pub fn reverse_step(
    model: &ScoreModel,
    x_t: &Tensor,
    t: usize,
    z: &Tensor,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    obs: Option<&[(&[f32], &ForwardOperator)]>,
) -> Result<Tensor> {
    if t == 0 || t > schedule.len() {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} out of range 1..={}",
            schedule.len()
        )));
    }
    if z.shape() != x_t.shape() {
        return Err(Error::ShapeMismatch {
            op: "reverse_step",
            detail: format!("z {:?} vs x {:?}", z.shape(), x_t.shape()),
        });
    }
    let beta = schedule.beta(t);
    let total = match obs {
        Some(items) if cfg.lambda > 0.0 => {
            let eval = model.tweedie_vjp(x_t, t, schedule)?;
            let (ell, score) =
                likelihood_from_eval(eval, x_t.rows(), items, cfg.sigma, schedule.alpha_bar(t))?;
            let mut s = score;
            s.axpy(cfg.lambda, &ell);
            s
        }
        _ => model.eval_score(x_t, t, schedule)?,
    };
    // x' = x + beta (x/2 + total) + sqrt(beta) z
    let mut out = x_t.clone();
    out.axpy(beta * 0.5, x_t);
    out.axpy(beta, &total);
    out.axpy(beta.sqrt(), z);
    if !out.is_finite() {
        return Err(Error::NonFinite { op: "reverse_step" });
    }
    Ok(out)
}

/// Run one group of chains synchronously from t = start down to 1.
/// Rows marked divergent are zeroed and skipped in the outcome.
fn run_chain_group(
    model: &ScoreModel,
    items: Option<&[&Observation]>,
    n: usize,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    seed_offset: usize,
) -> Result<Vec<ChainOutcome>> {
    let d = model.dim();
    let start = cfg.start_t(schedule);
    let mut rngs: Vec<_> =
        (0..n).map(|i| stream(cfg.seed, "dps-chain", (seed_offset + i) as u64)).collect();

    let mut x = {
        let mut data = Vec::with_capacity(n * d);
        for rng in &mut rngs {
            data.extend(Tensor::randn(&[d], rng).into_data());
        }
        Tensor::from_parts(vec![n, d], data)
    };
    let mut diverged: Vec<Option<(usize, f32)>> = vec![None; n];

    for t in (1..=start).rev() {
        let z = {
            let mut data = Vec::with_capacity(n * d);
            for rng in &mut rngs {
                if t > 1 {
                    data.extend(Tensor::randn(&[d], rng).into_data());
                } else {
                    data.extend(std::iter::repeat_n(0.0f32, d));
                }
            }
            Tensor::from_parts(vec![n, d], data)
        };
        let obs_refs: Option<Vec<(&[f32], &ForwardOperator)>> =
            items.map(|its| its.iter().map(|o| (o.y.as_slice(), &o.op)).collect());
        x = reverse_step(model, &x, t, &z, schedule, cfg, obs_refs.as_deref())?;

        for i in 0..n {
            if diverged[i].is_some() {
                continue;
            }
            let norm = x.row(i).iter().fold(0.0f32, |m, v| m.max(v.abs()));
            if norm > DIVERGENCE_NORM {
                diverged[i] = Some((t, norm));
                for v in x.row_mut(i) {
                    *v = 0.0;
                }
            }
        }
    }

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if let Some((t, norm)) = diverged[i] {
            out.push(ChainOutcome::Diverged { t, norm });
        } else {
            let x0 = x.row(i).to_vec();
            let loss = match items {
                Some(its) => data_loss(&its[i].y, &x0, &its[i].op)?,
                None => 0.0,
            };
            out.push(ChainOutcome::Converged(PosteriorSample { x0, data_loss: loss }));
        }
    }
    Ok(out)
}

fn group_size(model: &ScoreModel, total: usize) -> usize {
    match model {
        // bounded tape memory per group
        ScoreModel::Neural(_) => 128,
        _ => total.max(1),
    }
}

/// Posterior-sample every observation (one chain each), batched through the
/// model. Chain i draws from the stream (cfg.seed, "dps-chain", i), so
/// results are independent of grouping and parallel scheduling.
pub fn sample_posterior_batch(
    model: &ScoreModel,
    items: &[&Observation],
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Vec<ChainOutcome>> {
    cfg.validate(true)?;
    if items.is_empty() {
        return Ok(Vec::new());
    }
    for o in items {
        if o.op.input_dim() != model.dim() {
            return Err(Error::ShapeMismatch {
                op: "sample_posterior",
                detail: format!("operator dim {} vs model dim {}", o.op.input_dim(), model.dim()),
            });
        }
    }
    let group = group_size(model, items.len());
    let chunks: Vec<(usize, &[&Observation])> = items
        .chunks(group)
        .enumerate()
        .map(|(gi, ch)| (gi * group, ch))
        .collect();
    let results: Result<Vec<Vec<ChainOutcome>>> = chunks
        .par_iter()
        .map(|(offset, ch)| run_chain_group(model, Some(ch), ch.len(), schedule, cfg, *offset))
        .collect();
    Ok(results?.into_iter().flatten().collect())
}

/// Single-observation posterior sample; divergence is an error here.
pub fn sample_posterior(
    model: &ScoreModel,
    obs: &Observation,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<PosteriorSample> {
    let outcomes = sample_posterior_batch(model, &[obs], schedule, cfg)?;
    match outcomes.into_iter().next().unwrap() {
        ChainOutcome::Converged(s) => Ok(s),
        ChainOutcome::Diverged { t, norm } => Err(Error::ChainDiverged { t, norm }),
    }
}

/// Unconditional ancestral sampling: n chains from x_T ~ N(0, I).
/// Chain i shares its noise stream with posterior chain i, so a lambda = 0
/// posterior chain is bit-identical to this one.
pub fn sample_prior(
    model: &ScoreModel,
    n: usize,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    cfg.validate(false)?;
    let d = model.dim();
    let group = group_size(model, n);
    let starts: Vec<usize> = (0..n).step_by(group).collect();
    let results: Result<Vec<Vec<ChainOutcome>>> = starts
        .par_iter()
        .map(|&offset| {
            let len = group.min(n - offset);
            run_chain_group(model, None, len, schedule, cfg, offset)
        })
        .collect();
    let mut data = Vec::with_capacity(n * d);
    for outcome in results?.into_iter().flatten() {
        match outcome {
            ChainOutcome::Converged(s) => data.extend(s.x0),
            ChainOutcome::Diverged { t, norm } => return Err(Error::ChainDiverged { t, norm }),
        }
    }
    Ok(Tensor::from_parts(vec![n, d], data))
}

/// Result of the likelihood-scale search.
#[derive(Clone, Debug)]
pub struct LambdaSearchResult {
    /// Candidates in ascending order.
    pub grid: Vec<f32>,
    /// Mean terminal data loss per candidate; None when every chain diverged.
    pub mean_loss: Vec<Option<f32>>,
    /// Diverged-chain count per candidate.
    pub diverged: Vec<usize>,
    pub selected: f32,
}

fn argmin_valid(grid: &[f32], losses: &[Option<f32>]) -> Option<usize> {
    debug_assert_eq!(grid.len(), losses.len());
    let mut best: Option<usize> = None;
    for (i, loss) in losses.iter().enumerate() {
        let Some(l) = loss else { continue };
        match best {
            // strict improvement only: ties resolve to the smaller lambda,
            // which comes first in the ascending grid
            Some(b) => {
                if *l < losses[b].unwrap() {
                    best = Some(i);
                }
            }
            None => best = Some(i),
        }
    }
    best
}

/// Pick the likelihood scale minimizing mean terminal data loss over a
/// subset of observations. Every candidate reuses the same chain noise
/// streams, so the comparison isolates the effect of lambda.
pub fn select_lambda(
    model: &ScoreModel,
    observations: &[&Observation],
    schedule: &NoiseSchedule,
    grid: &[f32],
    base: &SamplerConfig,
) -> Result<LambdaSearchResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("lambda grid is empty".into()));
    }
    if observations.is_empty() {
        return Err(Error::InvalidArgument("lambda selection needs observations".into()));
    }
    if grid.iter().any(|l| *l < 0.0 || !l.is_finite()) {
        return Err(Error::InvalidArgument("lambda candidates must be finite and >= 0".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument("lambda candidates must be distinct".into()));
    }

    let mut mean_loss = Vec::with_capacity(sorted.len());
    let mut diverged_counts = Vec::with_capacity(sorted.len());
    for &lambda in &sorted {
        let cfg = SamplerConfig { lambda, ..base.clone() };
        let outcomes = sample_posterior_batch(model, observations, schedule, &cfg)?;
        let mut total = 0.0f64;
        let mut ok = 0usize;
        let mut bad = 0usize;
        for o in &outcomes {
            match o {
                ChainOutcome::Converged(s) => {
                    total += s.data_loss as f64;
                    ok += 1;
                }
                ChainOutcome::Diverged { .. } => bad += 1,
            }
        }
        mean_loss.push(if ok > 0 { Some((total / ok as f64) as f32) } else { None });
        diverged_counts.push(bad);
    }

    let best = argmin_valid(&sorted, &mean_loss).ok_or(Error::AllCandidatesDiverged)?;
    Ok(LambdaSearchResult {
        selected: sorted[best],
        grid: sorted,
        mean_loss,
        diverged: diverged_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::corrupt;
    use crate::score::{GaussianPrior, ScoreModel};
    use crate::testing::{fd_grad, max_rel_err, mean_and_cov, mlp_forward_f64};

    fn sched(t: usize) -> NoiseSchedule {
        NoiseSchedule::linear(t, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn tweedie_examples() {
        let s = sched(200);
        let model = ScoreModel::Gaussian(GaussianPrior::standard(2));
        let x = Tensor::new(vec![1, 2], vec![0.8, -0.4]).unwrap();

        // exact N(0,I) score: x0_hat = sqrt(abar) x
        let t = 120;
        let x0 = tweedie_x0(&model, &x, t, &s).unwrap();
        let sab = s.alpha_bar(t).sqrt();
        for (got, want) in x0.data().iter().zip(x.data()) {
            assert!((got - want * sab).abs() < 1e-5);
        }

        // t = 1: essentially no noise yet, x0_hat ~ x_t
        let x0 = tweedie_x0(&model, &x, 1, &s).unwrap();
        for (got, want) in x0.data().iter().zip(x.data()) {
            assert!((got - want).abs() < 1e-3);
        }
    }

    #[test]
    fn tweedie_matches_joint_gaussian_conditioning() {
        // E[x0|xt] = mu + sqrt(ab) S (ab S + (1-ab) I)^-1 (x - sqrt(ab) mu)
        let mean = vec![0.5f32, -1.0];
        let cov = vec![1.5f32, 0.4, 0.4, 0.8];
        let model = ScoreModel::Gaussian(GaussianPrior::new(mean.clone(), cov.clone()).unwrap());
        let s = sched(200);
        let x = Tensor::new(vec![1, 2], vec![1.3, 0.2]).unwrap();
        for &t in &[15usize, 90, 200] {
            let ab = s.alpha_bar(t) as f64;
            let sab = ab.sqrt();
            let mut c = vec![0.0f64; 4];
            for i in 0..2 {
                for j in 0..2 {
                    c[i * 2 + j] = ab * cov[i * 2 + j] as f64;
                }
                c[i * 2 + i] += 1.0 - ab;
            }
            let cinv = crate::linalg::spd_inverse(2, &c).unwrap();
            let diff = [x.data()[0] as f64 - sab * 0.5, x.data()[1] as f64 - sab * -1.0];
            let ci = crate::linalg::mat_vec(2, 2, &cinv, &diff);
            // sqrt(ab) * Sigma * cinv * diff + mu
            let mut want = [0.5f64, -1.0];
            for i in 0..2 {
                for j in 0..2 {
                    want[i] += sab * cov[i * 2 + j] as f64 * ci[j];
                }
            }
            let got = tweedie_x0(&model, &x, t, &s).unwrap();
            for i in 0..2 {
                assert!(
                    (got.data()[i] as f64 - want[i]).abs() < 1e-5,
                    "t={t} coord {i}: {} vs {}",
                    got.data()[i],
                    want[i]
                );
            }
        }
    }

    #[test]
    fn reverse_step_hand_check() {
        // x=1, score=-1 (std normal prior at x=1), beta=0.02, z=0:
        // x' = 1 + 0.02*(0.5 - 1) = 0.99
        let s = NoiseSchedule::linear(10, 0.02, 0.02).unwrap();
        let model = ScoreModel::Gaussian(GaussianPrior::standard(1));
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let z = Tensor::zeros(&[1, 1]);
        let cfg = SamplerConfig::unconditional(0);
        let out = reverse_step(&model, &x, 5, &z, &s, &cfg, None).unwrap();
        assert!((out.data()[0] - 0.99).abs() < 1e-6, "got {}", out.data()[0]);
    }

    #[test]
    fn reverse_step_beta_to_zero_is_identity() {
        let s = NoiseSchedule::linear(5, 1e-9, 1e-9).unwrap();
        let model = ScoreModel::Gaussian(GaussianPrior::standard(1));
        let x = Tensor::new(vec![1, 1], vec![0.37]).unwrap();
        let z = Tensor::zeros(&[1, 1]);
        let out = reverse_step(&model, &x, 3, &z, &s, &SamplerConfig::unconditional(0), None).unwrap();
        assert!((out.data()[0] - 0.37).abs() < 1e-7);
    }

    #[test]
    fn lambda_zero_posterior_is_bit_identical_to_unconditional() {
        let s = sched(60);
        let model = ScoreModel::Gaussian(GaussianPrior::standard(2));
        let op = ForwardOperator::identity(&[2]);
        let obs = Observation { y: vec![0.4, -0.2], op, sigma: 0.5 };
        let cfg = SamplerConfig { lambda: 0.0, sigma: 0.5, steps: None, seed: 99 };
        let post = sample_posterior(&model, &obs, &s, &cfg).unwrap();
        let prior = sample_prior(&model, 1, &s, &cfg).unwrap();
        assert_eq!(post.x0.as_slice(), prior.row(0));
    }

    #[test]
    fn posterior_sampling_is_seed_deterministic() {
        let s = sched(40);
        let model = ScoreModel::Gaussian(GaussianPrior::standard(2));
        let op = ForwardOperator::identity(&[2]);
        let obs = Observation { y: vec![1.0, 0.0], op, sigma: 0.5 };
        let cfg = SamplerConfig::posterior(1.0, 0.5, 7);
        let a = sample_posterior(&model, &obs, &s, &cfg).unwrap();
        let b = sample_posterior(&model, &obs, &s, &cfg).unwrap();
        assert_eq!(a.x0, b.x0);
        assert_eq!(a.data_loss, b.data_loss);
    }

    #[test]
    fn consistent_observation_gives_zero_likelihood_gradient() {
        let s = sched(100);
        let model = ScoreModel::Gaussian(GaussianPrior::standard(3));
        let x = Tensor::new(vec![1, 3], vec![0.6, -0.1, 0.9]).unwrap();
        let t = 40;
        let x0 = tweedie_x0(&model, &x, t, &s).unwrap();
        let op = ForwardOperator::identity(&[3]);
        let y = op.apply(x0.row(0)).unwrap();
        let g = posterior_likelihood_score(&model, &x, t, &y, &op, 0.5, &s).unwrap();
        assert!(g.max_abs() < 1e-5, "gradient {:?}", g.data());
    }

    #[test]
    fn gaussian_likelihood_gradient_matches_closed_form() {
        // assemble the gradient by hand from the affine Jacobian of x0_hat
        let mean = vec![0.3f32, -0.7];
        let cov = vec![1.2f32, -0.2, -0.2, 0.9];
        let prior = GaussianPrior::new(mean, cov).unwrap();
        let model = ScoreModel::Gaussian(prior);
        let s = sched(150);
        let (t, sigma) = (70usize, 0.4f32);
        let x = Tensor::new(vec![1, 2], vec![0.9, 0.1]).unwrap();
        let (mask_op, _) = ForwardOperator::mask(&[2], 1.0, 0).unwrap(); // keeps both
        let y = vec![0.2f32, -0.5];

        let got = posterior_likelihood_score(&model, &x, t, &y, &mask_op, sigma, &s).unwrap();

        // oracle: J^T A^T r / sigma_t^2 where J is d x0hat / dx
        let ab = s.alpha_bar(t);
        let eval = model.tweedie_vjp(&x, t, &s).unwrap();
        let r: Vec<f32> =
            y.iter().zip(mask_op.apply(eval.x0_hat.row(0)).unwrap()).map(|(a, b)| a - b).collect();
        let back = mask_op.adjoint(&r).unwrap();
        let h = 1e-3f64;
        // FD Jacobian of x0_hat for the oracle product
        let mut want = vec![0.0f64; 2];
        for j in 0..2 {
            let mut xp = x.clone();
            xp.data_mut()[j] += h as f32;
            let x0p = tweedie_x0(&model, &xp, t, &s).unwrap();
            let mut xm = x.clone();
            xm.data_mut()[j] -= h as f32;
            let x0m = tweedie_x0(&model, &xm, t, &s).unwrap();
            for i in 0..2 {
                let jij = (x0p.data()[i] as f64 - x0m.data()[i] as f64) / (2.0 * h);
                want[j] += jij * back[i] as f64;
            }
        }
        let w = 1.0 / (sigma * sigma + (1.0 - ab)) as f64;
        for v in &mut want {
            *v *= w;
        }
        let err = max_rel_err(got.data(), &want);
        assert!(err < 1e-4, "rel err {err:.3e}");
    }

    #[test]
    fn neural_likelihood_gradient_matches_finite_differences() {
        let net = crate::net::MlpScoreNet::new(3, &[10], 4, crate::net::Activation::Silu, 5).unwrap();
        let model = ScoreModel::Neural(net);
        let s = sched(80);
        let (t, sigma) = (30usize, 0.3f32);
        let x = Tensor::new(vec![1, 3], vec![0.4, -0.6, 0.2]).unwrap();
        let (op, _) = ForwardOperator::mask(&[3], 0.8, 3).unwrap();
        let y: Vec<f32> = (0..op.output_dim()).map(|i| 0.3 * i as f32 - 0.2).collect();

        let got = posterior_likelihood_score(&model, &x, t, &y, &op, sigma, &s).unwrap();

        // f64 oracle of the scalar -1/(2 sigma_t^2) ||y - A x0hat(x)||^2
        let ab = s.alpha_bar(t) as f64;
        let net = match &model {
            ScoreModel::Neural(n) => n,
            _ => unreachable!(),
        };
        let scalar = |xv: &[f64]| -> f64 {
            let out = mlp_forward_f64(net, xv, t);
            let eps_scale = (1.0 - ab).sqrt();
            // x0 = x/sqrt(ab) + out*eps_scale/sqrt(ab)
            let x0: Vec<f32> = xv
                .iter()
                .zip(&out)
                .map(|(x, o)| ((x + o * eps_scale) / ab.sqrt()) as f32)
                .collect();
            let ax = op.apply(&x0).unwrap();
            let sq: f64 =
                y.iter().zip(&ax).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
            let w = (sigma as f64).powi(2) + (1.0 - ab);
            -0.5 * sq / w
        };
        let base: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let fd = fd_grad(&base, 1e-3, scalar);
        let err = max_rel_err(got.data(), &fd);
        assert!(err < 1e-3, "rel err {err:.3e}");
    }

    #[test]
    fn unconditional_chain_matches_known_prior_smoke() {
        // light version of the full acceptance check
        let s = sched(100);
        let model = ScoreModel::Gaussian(GaussianPrior::standard(2));
        let samples = sample_prior(&model, 2000, &s, &SamplerConfig::unconditional(123)).unwrap();
        let (mean, cov) = mean_and_cov(&samples);
        for j in 0..2 {
            assert!(mean[j].abs() < 0.1, "mean {mean:?}");
            assert!((cov[j * 2 + j] - 1.0).abs() < 0.1, "cov {cov:?}");
        }
    }

    #[test]
    fn posterior_matches_conjugate_oracle_smoke() {
        let s = sched(200);
        let model = ScoreModel::Gaussian(GaussianPrior::standard(1));
        let sigma = 0.5f32;
        let y = vec![1.1f32];
        let op = ForwardOperator::identity(&[1]);
        let obs = Observation { y: y.clone(), op, sigma };
        let items: Vec<&Observation> = std::iter::repeat_n(&obs, 1500).collect();
        let cfg = SamplerConfig::posterior(1.0, sigma, 31);
        let outcomes = sample_posterior_batch(&model, &items, &s, &cfg).unwrap();
        let xs: Vec<f32> = outcomes.iter().map(|o| o.converged().unwrap().x0[0]).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let want_mean = y[0] as f64 / (1.0 + (sigma as f64).powi(2));
        let want_var = (sigma as f64).powi(2) / (1.0 + (sigma as f64).powi(2));
        assert!((mean - want_mean).abs() / want_mean < 0.10, "mean {mean} want {want_mean}");
        assert!((var - want_var).abs() / want_var < 0.15, "var {var} want {want_var}");
    }

    #[test]
    fn mean_data_loss_decreases_with_lambda_under_mismatched_prior() {
        // deliberately wrong prior mean; larger lambda must fit data better
        let s = sched(100);
        let model =
            ScoreModel::Gaussian(GaussianPrior::new(vec![3.0, 3.0], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let op = ForwardOperator::identity(&[2]);
        let mut rng = stream(42, "mismatch", 0);
        let observations: Vec<Observation> = (0..16)
            .map(|_| {
                let x = [-1.0f32, 0.5];
                let y = corrupt(&x, &op, 0.1, &mut rng).unwrap();
                Observation { y, op: op.clone(), sigma: 0.1 }
            })
            .collect();
        let refs: Vec<&Observation> = observations.iter().collect();
        let base = SamplerConfig::posterior(1.0, 0.1, 77);
        let res = select_lambda(&model, &refs, &s, &[1.0, 10.0, 20.0], &base).unwrap();
        let losses: Vec<f32> = res.mean_loss.iter().map(|l| l.unwrap()).collect();
        assert!(losses[0] > losses[1] && losses[1] > losses[2], "losses {losses:?}");
        assert_eq!(res.selected, 20.0);
    }

    #[test]
    fn lambda_argmin_rules() {
        // argmin picks the stated winner
        assert_eq!(argmin_valid(&[1.0, 10.0, 20.0], &[Some(0.9), Some(0.4), Some(0.41)]), Some(1));
        // ties break toward the smaller lambda
        assert_eq!(argmin_valid(&[1.0, 10.0], &[Some(0.4), Some(0.4)]), Some(0));
        // invalid candidates are skipped
        assert_eq!(argmin_valid(&[1.0, 10.0], &[None, Some(0.4)]), Some(1));
        assert_eq!(argmin_valid(&[1.0], &[None]), None);
        // scaling losses by a positive constant keeps the argmin
        let base = [Some(0.9f32), Some(0.4), Some(0.41)];
        let scaled: Vec<Option<f32>> = base.iter().map(|l| l.map(|v| v * 37.5)).collect();
        assert_eq!(
            argmin_valid(&[1.0, 10.0, 20.0], &base),
            argmin_valid(&[1.0, 10.0, 20.0], &scaled)
        );
    }

    #[test]
    fn duplicate_lambda_grid_rejected() {
        let s = sched(10);
        let model = ScoreModel::Gaussian(GaussianPrior::standard(1));
        let op = ForwardOperator::identity(&[1]);
        let obs = Observation { y: vec![0.0], op, sigma: 0.5 };
        let err = select_lambda(
            &model,
            &[&obs],
            &s,
            &[5.0, 5.0],
            &SamplerConfig::posterior(1.0, 0.5, 0),
        );
        assert!(err.is_err());
    }
}
