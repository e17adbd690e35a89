//! Score models: one trainable neural variant and three closed-form or
//! brute-force variants used as verification instruments.
//!
//! All variants answer `eval_score(x, t)` approximating the gradient of the
//! log of the prior diffused to time t, and `tweedie_vjp` which additionally
//! exposes the posterior-mean estimate and a vector-Jacobian product through
//! it (what the data-likelihood gradient needs).

use crate::error::{Error, Result};
use crate::linalg;
use crate::net::MlpScoreNet;
use crate::schedule::NoiseSchedule;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Floor for alpha_bar in the Tweedie division.
pub const ALPHA_BAR_FLOOR: f32 = 1e-8;

/// Gaussian prior N(mean, cov), validated SPD.
#[derive(Clone, Debug)]
pub struct GaussianPrior {
    mean: Vec<f32>,
    cov: Vec<f32>,
    chol: Vec<f64>,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f32>, cov: Vec<f32>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::ShapeMismatch {
                op: "GaussianPrior::new",
                detail: format!("mean dim {d}, cov len {}", cov.len()),
            });
        }
        let cov64: Vec<f64> = cov.iter().map(|&v| v as f64).collect();
        for i in 0..d {
            for j in 0..i {
                if (cov64[i * d + j] - cov64[j * d + i]).abs() > 1e-6 {
                    return Err(Error::InvalidArgument("covariance must be symmetric".into()));
                }
            }
        }
        let chol = linalg::cholesky(d, &cov64)?;
        Ok(Self { mean, cov, chol })
    }

    pub fn standard(d: usize) -> Self {
        Self::isotropic(d, 1.0).expect("unit variance is SPD")
    }

    pub fn isotropic(d: usize, var: f32) -> Result<Self> {
        let mut cov = vec![0.0f32; d * d];
        for i in 0..d {
            cov[i * d + i] = var;
        }
        Self::new(vec![0.0; d], cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn cov(&self) -> &[f32] {
        &self.cov
    }

    /// One draw: mean + L z.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f32> {
        let d = self.dim();
        let z: Vec<f64> =
            (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let mut x = vec![0.0f32; d];
        for i in 0..d {
            let mut s = self.mean[i] as f64;
            for k in 0..=i {
                s += self.chol[i * d + k] * z[k];
            }
            x[i] = s as f32;
        }
        x
    }
}

/// Mixture of Gaussians; weights nonnegative and summing to one.
#[derive(Clone, Debug)]
pub struct GmmPrior {
    components: Vec<(f64, GaussianPrior)>,
}

impl GmmPrior {
    pub fn new(components: Vec<(f64, GaussianPrior)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument("mixture needs at least one component".into()));
        }
        let d = components[0].1.dim();
        if components.iter().any(|(_, g)| g.dim() != d) {
            return Err(Error::InvalidArgument("mixture components disagree on dimension".into()));
        }
        if components.iter().any(|(w, _)| *w < 0.0) {
            return Err(Error::InvalidArgument("mixture weights must be nonnegative".into()));
        }
        let total: f64 = components.iter().map(|(w, _)| *w).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self { components })
    }

    pub fn dim(&self) -> usize {
        self.components[0].1.dim()
    }

    pub fn components(&self) -> &[(f64, GaussianPrior)] {
        &self.components
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f32> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (w, g) in &self.components {
            acc += w;
            if u <= acc {
                return g.sample(rng);
            }
        }
        self.components.last().unwrap().1.sample(rng)
    }
}

/// Tabulated density on a regular 1-D or 2-D grid, used as a brute-force
/// score oracle for arbitrary priors.
#[derive(Clone, Debug)]
pub struct GridDensity {
    /// Row-major values, shape [ny, nx] for 2-D or [n] for 1-D.
    values: Vec<f64>,
    dims: Vec<usize>,
    origin: Vec<f64>,
    spacing: f64,
}

impl GridDensity {
    pub fn new(values: Vec<f64>, dims: Vec<usize>, origin: Vec<f64>, spacing: f64) -> Result<Self> {
        if dims.is_empty() || dims.len() > 2 || dims.len() != origin.len() {
            return Err(Error::InvalidArgument("grid must be 1-D or 2-D".into()));
        }
        if values.len() != dims.iter().product::<usize>() {
            return Err(Error::InvalidArgument("grid value count does not match dims".into()));
        }
        if spacing <= 0.0 {
            return Err(Error::InvalidArgument("grid spacing must be positive".into()));
        }
        if values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArgument("densities must be finite and nonnegative".into()));
        }
        let cell = spacing.powi(dims.len() as i32);
        let mass: f64 = values.iter().sum::<f64>() * cell;
        if (mass - 1.0).abs() > 1e-3 {
            return Err(Error::InvalidArgument(format!("grid density mass {mass:.5}, expected 1")));
        }
        // renormalize exactly so downstream log-densities are consistent
        let values = values.into_iter().map(|v| v / mass).collect();
        Ok(Self { values, dims, origin, spacing })
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    fn point(&self, flat: usize) -> [f64; 2] {
        match self.dims.len() {
            1 => [self.origin[0] + flat as f64 * self.spacing, 0.0],
            _ => {
                let nx = self.dims[1];
                let (iy, ix) = (flat / nx, flat % nx);
                [self.origin[0] + iy as f64 * self.spacing, self.origin[1] + ix as f64 * self.spacing]
            }
        }
    }

    fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.origin).zip(&self.dims).all(|((&xi, &o), &n)| {
            xi >= o - 1e-9 && xi <= o + (n - 1) as f64 * self.spacing + 1e-9
        })
    }

    /// Diffused density p_t(x): discrete convolution of the rescaled grid
    /// density with the N(0, (1-abar) I) kernel, by direct quadrature.
    fn log_density_t(&self, x: &[f64], alpha_bar: f64) -> f64 {
        let d = self.dim();
        let var = (1.0 - alpha_bar).max(1e-12);
        let sab = alpha_bar.sqrt();
        let cell = self.spacing.powi(d as i32);
        let log_norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI * var).ln();
        let mut max_e = f64::NEG_INFINITY;
        let mut terms = Vec::with_capacity(self.values.len());
        for (flat, &p) in self.values.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            let g = self.point(flat);
            let mut sq = 0.0;
            for j in 0..d {
                let diff = x[j] - sab * g[j];
                sq += diff * diff;
            }
            let e = p.ln() + log_norm - 0.5 * sq / var;
            max_e = max_e.max(e);
            terms.push(e);
        }
        let sum: f64 = terms.iter().map(|e| (e - max_e).exp()).sum();
        max_e + sum.ln() + cell.ln()
    }

    /// Centered-difference gradient of log p_t at `x`.
    pub fn score_at(&self, x: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "grid_score",
                detail: format!("query dim {} vs grid dim {}", x.len(), self.dim()),
            });
        }
        if !self.contains(x) {
            return Err(Error::InvalidArgument(format!("query {x:?} outside tabulated grid")));
        }
        let h = self.spacing / 2.0;
        let mut g = vec![0.0f64; x.len()];
        let mut probe = x.to_vec();
        for j in 0..x.len() {
            probe[j] = x[j] + h;
            let fp = self.log_density_t(&probe, alpha_bar);
            probe[j] = x[j] - h;
            let fm = self.log_density_t(&probe, alpha_bar);
            probe[j] = x[j];
            g[j] = (fp - fm) / (2.0 * h);
        }
        Ok(g)
    }
}

/// Posterior-mean estimate together with the score and a VJP through it.
pub struct TweedieEval {
    pub x0_hat: Tensor,
    pub score: Tensor,
    pub vjp: X0Vjp,
}

/// Vector-Jacobian product carrier for d x0_hat / d x_t.
pub enum X0Vjp {
    /// One transposed Jacobian shared by every row (affine models).
    Shared { jt: Vec<f32>, d: usize },
    /// A transposed Jacobian per row, stacked.
    PerRow { jt: Vec<f32>, d: usize },
    /// Recorded graph; backward from `x0` seeds the product.
    Tape { tape: Box<Tape>, x: Var, x0: Var },
}

impl X0Vjp {
    /// Apply the transposed Jacobian to a cotangent of x0_hat rows.
    pub fn apply(self, cot: &Tensor) -> Result<Tensor> {
        match self {
            X0Vjp::Shared { jt, d } => {
                let n = cot.rows();
                let mut out = vec![0.0f32; n * d];
                for i in 0..n {
                    let c = cot.row(i);
                    for a in 0..d {
                        out[i * d + a] = (0..d).map(|b| jt[a * d + b] * c[b]).sum();
                    }
                }
                Ok(Tensor::from_parts(vec![n, d], out))
            }
            X0Vjp::PerRow { jt, d } => {
                let n = cot.rows();
                let mut out = vec![0.0f32; n * d];
                for i in 0..n {
                    let c = cot.row(i);
                    let j = &jt[i * d * d..(i + 1) * d * d];
                    for a in 0..d {
                        out[i * d + a] = (0..d).map(|b| j[a * d + b] * c[b]).sum();
                    }
                }
                Ok(Tensor::from_parts(vec![n, d], out))
            }
            X0Vjp::Tape { mut tape, x, x0 } => {
                tape.backward_seeded(x0, cot.clone())?;
                tape.take_grad(x).ok_or(Error::DetachedBackward)
            }
        }
    }
}

/// Uniform handle over the score-function variants.
pub enum ScoreModel {
    Neural(MlpScoreNet),
    Gaussian(GaussianPrior),
    Gmm(GmmPrior),
    Grid(GridDensity),
}

impl ScoreModel {
    pub fn dim(&self) -> usize {
        match self {
            ScoreModel::Neural(net) => net.dim(),
            ScoreModel::Gaussian(g) => g.dim(),
            ScoreModel::Gmm(g) => g.dim(),
            ScoreModel::Grid(g) => g.dim(),
        }
    }

    fn check(&self, x: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<()> {
        if t == 0 || t > schedule.len() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} out of range 1..={}",
                schedule.len()
            )));
        }
        if x.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "eval_score",
                detail: format!("x dim {} vs model dim {}", x.cols(), self.dim()),
            });
        }
        Ok(())
    }

    /// Score of the prior diffused to time t, per row of `x`.
    pub fn eval_score(&self, x: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
        self.check(x, t, schedule)?;
        let ab = schedule.alpha_bar(t);
        let out = match self {
            ScoreModel::Neural(net) => {
                // the network predicts the negated forward noise at eps scale
                let eps_scale = (1.0 - ab).sqrt().max(1e-12);
                net.forward_t(x, t)?.scale(1.0 / eps_scale)
            }
            ScoreModel::Gaussian(g) => gaussian_diffused_score(g, x, ab)?,
            ScoreModel::Gmm(g) => gmm_diffused_score(g, x, ab)?.0,
            ScoreModel::Grid(g) => {
                let (n, d) = (x.rows(), x.cols());
                let mut out = vec![0.0f32; n * d];
                for i in 0..n {
                    let q: Vec<f64> = x.row(i).iter().map(|&v| v as f64).collect();
                    let s = g.score_at(&q, ab as f64)?;
                    for (j, v) in s.iter().enumerate() {
                        out[i * d + j] = *v as f32;
                    }
                }
                Tensor::from_parts(vec![n, d], out)
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite { op: "eval_score" });
        }
        Ok(out)
    }

    /// Tweedie posterior-mean estimate, its score, and a VJP through
    /// x0_hat(x_t). The Jacobian is exact for neural (reverse mode),
    /// Gaussian, and mixture variants; grid uses centered differences.
    pub fn tweedie_vjp(&self, x: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<TweedieEval> {
        self.check(x, t, schedule)?;
        let ab = schedule.alpha_bar(t).max(ALPHA_BAR_FLOOR);
        let sab = ab.sqrt();
        let d = self.dim();
        match self {
            ScoreModel::Neural(net) => {
                let mut tape = Box::new(Tape::new());
                let xv = tape.leaf(x.clone());
                let fwd = net.forward_tape(&mut tape, xv, &vec![t; x.rows()], None)?;
                let eps_scale = (1.0 - ab).sqrt().max(1e-12);
                // x0 = x/sqrt(ab) + out * sqrt(1-ab)/sqrt(ab)
                let xs = tape.scale(xv, 1.0 / sab)?;
                let os = tape.scale(fwd.out, eps_scale / sab)?;
                let x0v = tape.add(xs, os)?;
                let x0_hat = tape.value(x0v).clone();
                let score = tape.value(fwd.out).scale(1.0 / eps_scale);
                Ok(TweedieEval { x0_hat, score, vjp: X0Vjp::Tape { tape, x: xv, x0: x0v } })
            }
            ScoreModel::Gaussian(g) => {
                let score = gaussian_diffused_score(g, x, ab)?;
                let x0_hat = tweedie_combine(x, &score, ab);
                // J = (I - (1-ab) C^-1)/sqrt(ab); symmetric, so J^T = J
                let cinv = diffused_cov_inverse(g, ab)?;
                let mut jt = vec![0.0f32; d * d];
                for a in 0..d {
                    for b in 0..d {
                        let id = if a == b { 1.0 } else { 0.0 };
                        jt[a * d + b] = ((id - (1.0 - ab as f64) * cinv[a * d + b]) / sab as f64) as f32;
                    }
                }
                Ok(TweedieEval { x0_hat, score, vjp: X0Vjp::Shared { jt, d } })
            }
            ScoreModel::Gmm(g) => {
                let (score, jac_s) = gmm_diffused_score(g, x, ab)?;
                let x0_hat = tweedie_combine(x, &score, ab);
                let n = x.rows();
                let mut jt = vec![0.0f32; n * d * d];
                for i in 0..n {
                    for a in 0..d {
                        for b in 0..d {
                            let id = if a == b { 1.0 } else { 0.0 };
                            // score Jacobian is symmetric, and so is J
                            jt[i * d * d + a * d + b] =
                                (id + (1.0 - ab) * jac_s[i * d * d + a * d + b]) / sab;
                        }
                    }
                }
                Ok(TweedieEval { x0_hat, score, vjp: X0Vjp::PerRow { jt, d } })
            }
            ScoreModel::Grid(g) => {
                let score = self.eval_score(x, t, schedule)?;
                let x0_hat = tweedie_combine(x, &score, ab);
                let n = x.rows();
                let h = 1e-3f64;
                let mut jt = vec![0.0f32; n * d * d];
                for i in 0..n {
                    let base: Vec<f64> = x.row(i).iter().map(|&v| v as f64).collect();
                    let mut probe = base.clone();
                    for col in 0..d {
                        probe[col] = base[col] + h;
                        let sp = g.score_at(&probe, ab as f64)?;
                        probe[col] = base[col] - h;
                        let sm = g.score_at(&probe, ab as f64)?;
                        probe[col] = base[col];
                        for row in 0..d {
                            let ds = (sp[row] - sm[row]) / (2.0 * h);
                            let id = if row == col { 1.0 } else { 0.0 };
                            let j = (id + (1.0 - ab as f64) * ds) / sab as f64;
                            // store transposed
                            jt[i * d * d + col * d + row] = j as f32;
                        }
                    }
                }
                Ok(TweedieEval { x0_hat, score, vjp: X0Vjp::PerRow { jt, d } })
            }
        }
    }
}

/// x0_hat = (x + (1-abar) score) / sqrt(abar)
pub(crate) fn tweedie_combine(x: &Tensor, score: &Tensor, alpha_bar: f32) -> Tensor {
    let ab = alpha_bar.max(ALPHA_BAR_FLOOR);
    let mut out = x.scale(1.0 / ab.sqrt());
    out.axpy((1.0 - ab) / ab.sqrt(), score);
    out
}

fn diffused_cov_inverse(g: &GaussianPrior, ab: f32) -> Result<Vec<f64>> {
    let d = g.dim();
    let mut c = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..d {
            c[i * d + j] = ab as f64 * g.cov()[i * d + j] as f64;
        }
        c[i * d + i] += 1.0 - ab as f64;
    }
    linalg::spd_inverse(d, &c)
}

/// Score of N(sqrt(ab) mu, ab Sigma + (1-ab) I) at each row.
fn gaussian_diffused_score(g: &GaussianPrior, x: &Tensor, ab: f32) -> Result<Tensor> {
    let d = g.dim();
    let cinv = diffused_cov_inverse(g, ab)?;
    let sab = ab.sqrt() as f64;
    let n = x.rows();
    let mut out = vec![0.0f32; n * d];
    for i in 0..n {
        let row = x.row(i);
        let diff: Vec<f64> =
            (0..d).map(|j| row[j] as f64 - sab * g.mean()[j] as f64).collect();
        let ci = linalg::mat_vec(d, d, &cinv, &diff);
        for j in 0..d {
            out[i * d + j] = -ci[j] as f32;
        }
    }
    Ok(Tensor::from_parts(vec![n, d], out))
}

/// Mixture score and its (symmetric) Jacobian per row.
fn gmm_diffused_score(g: &GmmPrior, x: &Tensor, ab: f32) -> Result<(Tensor, Vec<f32>)> {
    let d = g.dim();
    let n = x.rows();
    let k = g.components().len();
    let ab64 = ab as f64;
    let sab = ab64.sqrt();

    // per-component diffused inverse covariances and log-normalizers
    let mut cinvs = Vec::with_capacity(k);
    let mut lognorms = Vec::with_capacity(k);
    for (_, comp) in g.components() {
        let mut c = vec![0.0f64; d * d];
        for i in 0..d {
            for j in 0..d {
                c[i * d + j] = ab64 * comp.cov()[i * d + j] as f64;
            }
            c[i * d + i] += 1.0 - ab64;
        }
        let l = linalg::cholesky(d, &c)?;
        let logdet = linalg::chol_logdet(d, &l);
        cinvs.push(linalg::spd_inverse(d, &c)?);
        lognorms.push(-0.5 * (logdet + d as f64 * (2.0 * std::f64::consts::PI).ln()));
    }

    let mut score = vec![0.0f32; n * d];
    let mut jac = vec![0.0f32; n * d * d];
    for i in 0..n {
        let row = x.row(i);
        let mut log_terms = Vec::with_capacity(k);
        let mut comp_scores = Vec::with_capacity(k);
        for (ki, (w, comp)) in g.components().iter().enumerate() {
            let diff: Vec<f64> =
                (0..d).map(|j| row[j] as f64 - sab * comp.mean()[j] as f64).collect();
            let ci = linalg::mat_vec(d, d, &cinvs[ki], &diff);
            let quad: f64 = diff.iter().zip(&ci).map(|(a, b)| a * b).sum();
            log_terms.push(w.max(1e-300).ln() + lognorms[ki] - 0.5 * quad);
            comp_scores.push(ci.iter().map(|v| -v).collect::<Vec<f64>>());
        }
        let max_lt = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = log_terms.iter().map(|lt| (lt - max_lt).exp()).collect();
        let total: f64 = weights.iter().sum();
        let resp: Vec<f64> = weights.iter().map(|w| w / total).collect();

        let mut s = vec![0.0f64; d];
        for ki in 0..k {
            for j in 0..d {
                s[j] += resp[ki] * comp_scores[ki][j];
            }
        }
        for j in 0..d {
            score[i * d + j] = s[j] as f32;
        }
        // J = -sum_k r_k C_k^-1 + sum_k r_k s_k s_k^T - s s^T
        for a in 0..d {
            for b in 0..d {
                let mut v = 0.0f64;
                for ki in 0..k {
                    v += resp[ki]
                        * (-cinvs[ki][a * d + b] + comp_scores[ki][a] * comp_scores[ki][b]);
                }
                v -= s[a] * s[b];
                jac[i * d * d + a * d + b] = v as f32;
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, d], score), jac))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{fd_grad, max_rel_err};

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(200, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn standard_normal_prior_score_is_minus_x() {
        // the diffused marginal of N(0,I) is N(0,I) at every t
        let model = ScoreModel::Gaussian(GaussianPrior::standard(3));
        let s = sched();
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.0, -1.0]).unwrap();
        for &t in &[1usize, 77, 200] {
            let sc = model.eval_score(&x, t, &s).unwrap();
            for (a, b) in sc.data().iter().zip(x.data()) {
                assert!((a + b).abs() < 1e-5, "t={t}");
            }
        }
    }

    #[test]
    fn gaussian_score_vanishes_at_diffused_mode() {
        let mean = vec![1.0f32, -2.0];
        let cov = vec![2.0f32, 0.3, 0.3, 0.5];
        let model = ScoreModel::Gaussian(GaussianPrior::new(mean.clone(), cov).unwrap());
        let s = sched();
        let t = 60;
        let sab = s.alpha_bar(t).sqrt();
        let x = Tensor::new(vec![1, 2], vec![sab * mean[0], sab * mean[1]]).unwrap();
        let sc = model.eval_score(&x, t, &s).unwrap();
        assert!(sc.max_abs() < 1e-5);
    }

    #[test]
    fn gmm_score_matches_numerical_gradient_of_log_density() {
        let c1 = GaussianPrior::new(vec![-1.5, 0.0], vec![0.5, 0.1, 0.1, 0.3]).unwrap();
        let c2 = GaussianPrior::new(vec![1.5, 1.0], vec![0.4, -0.05, -0.05, 0.6]).unwrap();
        let gmm = GmmPrior::new(vec![(0.4, c1), (0.6, c2)]).unwrap();
        let s = sched();

        // independent oracle: log of the explicitly summed diffused mixture
        // density, differentiated by central differences in f64
        let log_density = |x: &[f64], t: usize| -> f64 {
            let ab = s.alpha_bar(t) as f64;
            let sab = ab.sqrt();
            let mut total = 0.0f64;
            for (w, comp) in gmm.components() {
                let d = 2;
                let mut c = vec![0.0f64; 4];
                for i in 0..d {
                    for j in 0..d {
                        c[i * d + j] = ab * comp.cov()[i * d + j] as f64;
                    }
                    c[i * d + i] += 1.0 - ab;
                }
                let det = c[0] * c[3] - c[1] * c[2];
                let inv = [c[3] / det, -c[1] / det, -c[2] / det, c[0] / det];
                let dx = [x[0] - sab * comp.mean()[0] as f64, x[1] - sab * comp.mean()[1] as f64];
                let quad = dx[0] * (inv[0] * dx[0] + inv[1] * dx[1])
                    + dx[1] * (inv[2] * dx[0] + inv[3] * dx[1]);
                total += *w / (2.0 * std::f64::consts::PI * det.sqrt()) * (-0.5 * quad).exp();
            }
            total.ln()
        };

        let model = ScoreModel::Gmm(gmm.clone());
        for &t in &[20usize, 100, 180] {
            for &(px, py) in &[(-2.0f32, -0.5f32), (0.0, 0.5), (1.8, 1.2), (0.7, -0.9)] {
                let x = Tensor::new(vec![1, 2], vec![px, py]).unwrap();
                let got = model.eval_score(&x, t, &s).unwrap();
                let fd = fd_grad(&[px as f64, py as f64], 1e-5, |v| log_density(v, t));
                let err = max_rel_err(got.data(), &fd);
                assert!(err < 1e-5, "t={t} x=({px},{py}): rel err {err:.2e}");
            }
        }
    }

    #[test]
    fn grid_score_of_point_mass_is_gaussian_score() {
        // delta-like density at the origin: p_t ~ N(0, 1-abar)
        let n = 1601;
        let h = 0.005;
        let origin = -(n as f64 - 1.0) / 2.0 * h;
        let mut vals = vec![0.0f64; n];
        vals[n / 2] = 1.0 / h;
        let grid = GridDensity::new(vals, vec![n], vec![origin], h).unwrap();
        let s = sched();
        let t = 150;
        let ab = s.alpha_bar(t) as f64;
        for &x in &[-0.5f64, 0.2, 1.0] {
            let sc = grid.score_at(&[x], ab).unwrap()[0];
            let want = -x / (1.0 - ab);
            assert!((sc - want).abs() / want.abs().max(1.0) < 1e-2, "x={x}: {sc} vs {want}");
        }
    }

    #[test]
    fn grid_score_of_tabulated_normal_matches_analytic() {
        let n = 801;
        let h = 0.02;
        let origin = -(n as f64 - 1.0) / 2.0 * h;
        let vals: Vec<f64> = (0..n)
            .map(|i| {
                let x = origin + i as f64 * h;
                (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
            })
            .collect();
        let grid = GridDensity::new(vals, vec![n], vec![origin], h).unwrap();
        let s = sched();
        for &t in &[10usize, 100, 190] {
            let ab = s.alpha_bar(t) as f64;
            for &x in &[-1.2f64, 0.3, 2.0] {
                let sc = grid.score_at(&[x], ab).unwrap()[0];
                // diffused marginal of N(0,1) stays N(0,1): score = -x,
                // matched up to the O(h^2) differencing error
                assert!((sc + x).abs() < 2e-3, "t={t} x={x}: {sc} vs {}", -x);
            }
        }
    }

    #[test]
    fn grid_score_of_uniform_box() {
        // uniform on [-1,1]: zero score inside, restoring sign outside
        let n = 801;
        let h = 0.005;
        let origin = -2.0;
        let mut vals: Vec<f64> = (0..n)
            .map(|i| {
                let x = origin + i as f64 * h;
                if (-1.0..=1.0).contains(&x) { 0.5 } else { 0.0 }
            })
            .collect();
        let mass: f64 = vals.iter().sum::<f64>() * h;
        vals.iter_mut().for_each(|v| *v /= mass);
        let grid = GridDensity::new(vals, vec![n], vec![origin], h).unwrap();
        let s = sched();
        let ab = s.alpha_bar(5) as f64; // early time, little smoothing
        let inside = grid.score_at(&[0.0], ab).unwrap()[0];
        assert!(inside.abs() < 1e-6, "interior score {inside}");
        let right = grid.score_at(&[1.3], ab).unwrap()[0];
        let left = grid.score_at(&[-1.3], ab).unwrap()[0];
        assert!(right < -10.0, "outside-right score should pull back strongly, got {right}");
        assert!(left > 10.0, "outside-left score should pull back strongly, got {left}");
    }

    #[test]
    fn grid_rejects_out_of_support_queries() {
        let vals = vec![0.5f64; 401];
        let grid = GridDensity::new(
            vals.iter().map(|&v| v / (0.5 * 401.0 * 0.01)).collect(),
            vec![401],
            vec![-2.0],
            0.01,
        )
        .unwrap();
        assert!(grid.score_at(&[5.0], 0.9).is_err());
    }

    #[test]
    fn gmm_analytic_score_agrees_with_grid_oracle() {
        // oracle consistency: analytic GMM score vs brute-force grid score
        let c1 = GaussianPrior::new(vec![-1.0], vec![0.3]).unwrap();
        let c2 = GaussianPrior::new(vec![1.2], vec![0.5]).unwrap();
        let gmm = GmmPrior::new(vec![(0.5, c1.clone()), (0.5, c2.clone())]).unwrap();

        let n = 2001;
        let h = 0.005;
        let origin = -5.0;
        let dens = |x: f64| -> f64 {
            let g1 = (-0.5 * (x + 1.0) * (x + 1.0) / 0.3).exp() / (2.0 * std::f64::consts::PI * 0.3).sqrt();
            let g2 = (-0.5 * (x - 1.2) * (x - 1.2) / 0.5).exp() / (2.0 * std::f64::consts::PI * 0.5).sqrt();
            0.5 * g1 + 0.5 * g2
        };
        let vals: Vec<f64> = (0..n).map(|i| dens(origin + i as f64 * h)).collect();
        let grid = GridDensity::new(vals, vec![n], vec![origin], h).unwrap();

        let s = sched();
        let model = ScoreModel::Gmm(gmm);
        for &t in &[30usize, 120] {
            let ab = s.alpha_bar(t) as f64;
            for &x in &[-1.5f64, -0.3, 0.8, 1.6] {
                let xt = Tensor::new(vec![1, 1], vec![x as f32]).unwrap();
                let analytic = model.eval_score(&xt, t, &s).unwrap().data()[0] as f64;
                let brute = grid.score_at(&[x], ab).unwrap()[0];
                assert!((analytic - brute).abs() < 1e-3, "t={t} x={x}: {analytic} vs {brute}");
            }
        }
    }

    #[test]
    fn prior_validation() {
        assert!(GaussianPrior::new(vec![0.0; 2], vec![1.0, 2.0, 2.0, 1.0]).is_err());
        assert!(GaussianPrior::new(vec![0.0; 2], vec![1.0, 0.0, 0.1, 1.0]).is_err());
        let g = GaussianPrior::standard(1);
        assert!(GmmPrior::new(vec![(0.5, g.clone()), (0.49, g.clone())]).is_err());
        assert!(GmmPrior::new(vec![(1.5, g.clone()), (-0.5, g)]).is_err());
    }

    #[test]
    fn tweedie_equals_shrunk_state_for_standard_prior() {
        // exact N(0,I) score: x0_hat = sqrt(abar) x
        let model = ScoreModel::Gaussian(GaussianPrior::standard(2));
        let s = sched();
        let x = Tensor::new(vec![1, 2], vec![0.7, -1.1]).unwrap();
        for &t in &[1usize, 100, 200] {
            let ev = model.tweedie_vjp(&x, t, &s).unwrap();
            let sab = s.alpha_bar(t).sqrt();
            for (got, want) in ev.x0_hat.data().iter().zip(x.data()) {
                assert!((got - want * sab).abs() < 1e-4, "t={t}");
            }
        }
    }
}
