//! AdamW with decoupled weight decay, and parameter EMA.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor], lr: f32, weight_decay: f32) -> Result<Self> {
        if lr < 0.0 {
            return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {lr}")));
        }
        Ok(Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update. Weight decay is decoupled: p <- p*(1 - lr*wd)
    /// before the bias-corrected moment step.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                detail: format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        for ((p, g), (m, v)) in params.iter().zip(grads).zip(self.m.iter().zip(&self.v)) {
            if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                pd[j] = pd[j] * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of parameters.
#[derive(Clone, Debug)]
pub struct EmaState {
    decay: f32,
    shadow: Vec<Tensor>,
}

impl EmaState {
    pub fn new(decay: f32, params: &[&Tensor]) -> Result<Self> {
        if !(0.0 < decay && decay < 1.0) {
            return Err(Error::InvalidArgument(format!("EMA decay must be in (0,1), got {decay}")));
        }
        Ok(Self { decay, shadow: params.iter().map(|p| (*p).clone()).collect() })
    }

    /// Start the shadow from explicit tensors instead of the live parameters.
    pub fn with_shadow(decay: f32, shadow: Vec<Tensor>) -> Result<Self> {
        if !(0.0 < decay && decay < 1.0) {
            return Err(Error::InvalidArgument(format!("EMA decay must be in (0,1), got {decay}")));
        }
        Ok(Self { decay, shadow })
    }

    pub fn decay(&self) -> f32 {
        self.decay
    }

    pub fn shadow(&self) -> &[Tensor] {
        &self.shadow
    }

    pub fn into_shadow(self) -> Vec<Tensor> {
        self.shadow
    }

    /// shadow <- decay*shadow + (1-decay)*params, elementwise.
    pub fn update(&mut self, params: &[&Tensor]) -> Result<()> {
        if params.len() != self.shadow.len()
            || params.iter().zip(&self.shadow).any(|(p, s)| p.shape() != s.shape())
        {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                detail: "shadow layout does not match parameters".into(),
            });
        }
        for (s, p) in self.shadow.iter_mut().zip(params) {
            let d = self.decay;
            for (sv, pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = d * *sv + (1.0 - d) * pv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f32) -> Tensor {
        Tensor::from_vec(vec![v])
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let mut p = one_param(1.5);
        let mut opt = OptimizerState::new(&[&p], 0.1, 0.0).unwrap();
        opt.step(&mut [&mut p], &[one_param(0.0)]).unwrap();
        assert_eq!(p.data(), &[1.5]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn single_step_matches_scalar_reference() {
        // hand-rolled single AdamW step in f64
        let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
        let g = 1.0f64;
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1);
        let vhat = v / (1.0 - b2);
        let want = 1.0 - lr * mhat / (vhat.sqrt() + eps);

        let mut p = one_param(1.0);
        let mut opt = OptimizerState::new(&[&p], 0.1, 0.0).unwrap();
        opt.step(&mut [&mut p], &[one_param(1.0)]).unwrap();
        assert!((p.data()[0] as f64 - want).abs() < 1e-7, "got {}, want {want}", p.data()[0]);
    }

    #[test]
    fn decoupled_decay_alone() {
        let mut p = one_param(1.0);
        let mut opt = OptimizerState::new(&[&p], 0.1, 0.01).unwrap();
        opt.step(&mut [&mut p], &[one_param(0.0)]).unwrap();
        assert!((p.data()[0] - 0.999).abs() < 1e-7);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = one_param(1.0);
        let mut opt = OptimizerState::new(&[&p], 0.1, 0.0).unwrap();
        let bad = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(opt.step(&mut [&mut p], &[bad]).is_err());
    }

    #[test]
    fn ema_fixed_point_and_one_step() {
        let p = one_param(1.0);
        let mut ema = EmaState::new(0.999, &[&p]).unwrap();
        ema.update(&[&p]).unwrap();
        assert_eq!(ema.shadow()[0].data(), &[1.0]);

        let mut ema = EmaState::with_shadow(0.999, vec![one_param(0.0)]).unwrap();
        ema.update(&[&p]).unwrap();
        assert!((ema.shadow()[0].data()[0] - 0.001).abs() < 1e-7);
    }

    #[test]
    fn ema_geometric_series_closed_form() {
        // 1000 updates toward a constant: shadow = 1 - decay^1000
        let p = one_param(1.0);
        let mut ema = EmaState::with_shadow(0.999, vec![one_param(0.0)]).unwrap();
        for _ in 0..1000 {
            ema.update(&[&p]).unwrap();
        }
        let want = 1.0 - 0.999f64.powi(1000);
        assert!((ema.shadow()[0].data()[0] as f64 - want).abs() < 1e-3);
    }

    #[test]
    fn ema_rejects_bad_decay() {
        let p = one_param(1.0);
        assert!(EmaState::new(0.0, &[&p]).is_err());
        assert!(EmaState::new(1.0, &[&p]).is_err());
    }
}
