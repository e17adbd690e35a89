//! Discrete variance-preserving noise schedule.
//!
//! Timesteps are 1-based: beta(t) and alpha_bar(t) for t in 1..=T, with
//! alpha_bar(t) the running product of (1 - beta(s)). The corresponding
//! SDE drift is -beta(t)x/2 with diffusion sqrt(beta(t)).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    beta: Vec<f32>,
    alpha_bar: Vec<f32>,
}

impl NoiseSchedule {
    /// Linear beta schedule from `beta1` to `beta_t` inclusive.
    pub fn linear(t_steps: usize, beta1: f64, beta_t: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one timestep".into()));
        }
        if !(0.0 < beta1 && beta1 <= beta_t && beta_t < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta1 <= betaT < 1, got beta1={beta1}, betaT={beta_t}"
            )));
        }
        let denom = (t_steps - 1).max(1) as f64;
        let mut beta = Vec::with_capacity(t_steps);
        let mut alpha_bar = Vec::with_capacity(t_steps);
        let mut prod = 1.0f64;
        for i in 0..t_steps {
            let b = beta1 + (beta_t - beta1) * i as f64 / denom;
            prod *= 1.0 - b;
            beta.push(b as f32);
            alpha_bar.push(prod as f32);
        }
        Ok(Self { beta, alpha_bar })
    }

    /// The standard linear schedule: T=1000, beta1=1e-4, betaT=0.02.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default bounds are valid")
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} out of range 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f32 {
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f32 {
        self.alpha_bar[t - 1]
    }

    /// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
    pub fn forward_diffuse(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::ShapeMismatch {
                op: "forward_diffuse",
                detail: format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()),
            });
        }
        let ab = self.alpha_bar(t);
        let (ca, ce) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = x0.scale(ca);
        out.axpy(ce, eps);
        Ok(out)
    }

    /// Coefficient pair (sqrt(abar_t), sqrt(1-abar_t)).
    pub fn diffusion_coeffs(&self, t: usize) -> Result<(f32, f32)> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn default_linear_endpoints() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!((s.beta(1) - 1e-4).abs() < 1e-10);
        assert!((s.beta(1000) - 0.02).abs() < 1e-8);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-6);
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-7);
    }

    #[test]
    fn alpha_bar_matches_direct_product_and_log_sum() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        // direct product oracle in f64
        let mut prod = 1.0f64;
        let mut log_sum = 0.0f64;
        for i in 0..1000 {
            let b = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            prod *= 1.0 - b;
            log_sum += (1.0 - b).ln();
        }
        assert!((s.alpha_bar(1000) as f64 - prod).abs() < 1e-9);
        assert!((prod - log_sum.exp()).abs() < 1e-12);
        // t=500 coefficient pair against the same oracle
        let mut prod500 = 1.0f64;
        for i in 0..500 {
            let b = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            prod500 *= 1.0 - b;
        }
        let (ca, ce) = s.diffusion_coeffs(500).unwrap();
        assert!((ca as f64 - prod500.sqrt()).abs() < 1e-6);
        assert!((ce as f64 - (1.0 - prod500).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.5, 1.0).is_err());
    }

    #[test]
    fn monotone_and_variance_preserving() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        for t in 2..=200 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "abar not strictly decreasing at {t}");
            assert!(s.beta(t) >= s.beta(t - 1));
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
        }
        // abar + (1 - abar) == 1 exactly in floating point
        for t in 1..=200 {
            let ab = s.alpha_bar(t);
            assert_eq!(ab + (1.0 - ab), 1.0);
        }
    }

    #[test]
    fn empirical_variance_preserved_across_times() {
        // unit-variance x0 stays unit-variance after diffusion at any t
        let s = NoiseSchedule::default_linear();
        let mut rng = crate::rng::stream(8, "schedule-vp", 0);
        for &t in &[1usize, 100, 500, 1000] {
            let n = 100_000;
            let x0 = Tensor::randn(&[n], &mut rng);
            let eps = Tensor::randn(&[n], &mut rng);
            let xt = s.forward_diffuse(&x0, t, &eps).unwrap();
            let mean: f64 = xt.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var: f64 =
                xt.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((var - 1.0).abs() < 0.02, "t={t}: var {var}");
        }
    }

    #[test]
    fn diffuse_shrinks_with_zero_noise() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let x0 = Tensor::from_vec(vec![2.0, -4.0]);
        let eps = Tensor::zeros(&[2]);
        let xt = s.forward_diffuse(&x0, 30, &eps).unwrap();
        let ca = s.alpha_bar(30).sqrt();
        assert_eq!(xt.data(), &[2.0 * ca, -4.0 * ca]);
        assert!(s.forward_diffuse(&x0, 0, &eps).is_err());
        assert!(s.forward_diffuse(&x0, 101, &eps).is_err());
    }

    #[test]
    fn terminal_distribution_is_standard_normal() {
        // with unit-variance x0 the diffused marginal keeps variance ~1;
        // at t=T with T=1000 the signal share is negligible
        let s = NoiseSchedule::default_linear();
        let mut rng = crate::rng::stream(2, "schedule-test", 0);
        let n = 100_000;
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for _ in 0..n {
            let x0 = Tensor::from_vec(vec![rng.sample(rand_distr::StandardNormal)]);
            let eps = Tensor::from_vec(vec![rng.sample(rand_distr::StandardNormal)]);
            let xt = s.forward_diffuse(&x0, 1000, &eps).unwrap();
            sum += xt.data()[0] as f64;
            sumsq += (xt.data()[0] as f64).powi(2);
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
