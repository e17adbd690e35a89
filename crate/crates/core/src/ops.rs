//! Linear corruption operators with exact adjoints, plus the Gaussian
//! observation model and data-consistency loss.
//!
//! Masking compacts kept coordinates into an m-dimensional observation
//! (its adjoint scatters zeros); blurring is circular so the adjoint is
//! the correlation with the flipped kernel and stays exactly linear.

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
enum Kind {
    Identity,
    Mask { keep: Vec<usize> },
    Blur { kernel: Vec<f32>, k: usize },
}

#[derive(Clone, Debug)]
pub struct ForwardOperator {
    kind: Kind,
    input_shape: Vec<usize>,
}

impl ForwardOperator {
    pub fn identity(input_shape: &[usize]) -> Self {
        Self { kind: Kind::Identity, input_shape: input_shape.to_vec() }
    }

    /// Independent Bernoulli mask keeping each coordinate with probability
    /// `keep_prob`. A draw that masks everything is regenerated from the
    /// next stream of the same seed; `streams_used` reports how many draws
    /// it took (recorded in observation manifests).
    pub fn mask(input_shape: &[usize], keep_prob: f32, seed: u64) -> Result<(Self, u64)> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "keep_prob must be in (0, 1], got {keep_prob}"
            )));
        }
        let d: usize = input_shape.iter().product();
        let mut streams_used = 0u64;
        loop {
            let mut rng = stream(seed, "mask", streams_used);
            streams_used += 1;
            let keep: Vec<usize> =
                (0..d).filter(|_| rng.random::<f32>() < keep_prob).collect();
            if !keep.is_empty() {
                return Ok((
                    Self { kind: Kind::Mask { keep }, input_shape: input_shape.to_vec() },
                    streams_used,
                ));
            }
        }
    }

    /// Mask from an explicit bitmap (1 = kept), e.g. when reloading a
    /// persisted observation set.
    pub fn mask_from_bitmap(input_shape: &[usize], bitmap: &[f32]) -> Result<Self> {
        let d: usize = input_shape.iter().product();
        if bitmap.len() != d {
            return Err(Error::ShapeMismatch {
                op: "mask_from_bitmap",
                detail: format!("bitmap len {} vs input dim {d}", bitmap.len()),
            });
        }
        let keep: Vec<usize> =
            bitmap.iter().enumerate().filter(|(_, &b)| b != 0.0).map(|(i, _)| i).collect();
        if keep.is_empty() {
            return Err(Error::InvalidArgument("mask keeps no coordinates".into()));
        }
        Ok(Self { kind: Kind::Mask { keep }, input_shape: input_shape.to_vec() })
    }

    /// Circular 2-D Gaussian blur with an odd k x k kernel normalized to
    /// unit sum.
    pub fn blur(input_shape: &[usize], k: usize, sigma_blur: f64) -> Result<Self> {
        if input_shape.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "blur needs a 2-D input shape, got {input_shape:?}"
            )));
        }
        if k % 2 == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!("blur kernel size must be odd, got {k}")));
        }
        if sigma_blur <= 0.0 {
            return Err(Error::InvalidArgument("sigma_blur must be positive".into()));
        }
        let half = (k / 2) as i64;
        let mut kernel = vec![0.0f64; k * k];
        for dy in -half..=half {
            for dx in -half..=half {
                let v = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma_blur * sigma_blur)).exp();
                kernel[((dy + half) as usize) * k + (dx + half) as usize] = v;
            }
        }
        let total: f64 = kernel.iter().sum();
        let kernel: Vec<f32> = kernel.into_iter().map(|v| (v / total) as f32).collect();
        Ok(Self { kind: Kind::Blur { kernel, k }, input_shape: input_shape.to_vec() })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_dim(&self) -> usize {
        match &self.kind {
            Kind::Identity | Kind::Blur { .. } => self.input_dim(),
            Kind::Mask { keep } => keep.len(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match &self.kind {
            Kind::Identity => "identity",
            Kind::Mask { .. } => "mask",
            Kind::Blur { .. } => "blur",
        }
    }

    /// Kept-coordinate bitmap for mask operators.
    pub fn mask_bitmap(&self) -> Option<Vec<f32>> {
        match &self.kind {
            Kind::Mask { keep } => {
                let mut bm = vec![0.0f32; self.input_dim()];
                for &i in keep {
                    bm[i] = 1.0;
                }
                Some(bm)
            }
            _ => None,
        }
    }

    pub fn kernel(&self) -> Option<(&[f32], usize)> {
        match &self.kind {
            Kind::Blur { kernel, k } => Some((kernel, *k)),
            _ => None,
        }
    }

    pub fn apply(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "operator::apply",
                detail: format!("input len {} vs dim {}", x.len(), self.input_dim()),
            });
        }
        Ok(match &self.kind {
            Kind::Identity => x.to_vec(),
            Kind::Mask { keep } => keep.iter().map(|&i| x[i]).collect(),
            Kind::Blur { kernel, k } => {
                convolve_circular(x, self.input_shape[0], self.input_shape[1], kernel, *k, false)
            }
        })
    }

    pub fn adjoint(&self, y: &[f32]) -> Result<Vec<f32>> {
        if y.len() != self.output_dim() {
            return Err(Error::ShapeMismatch {
                op: "operator::adjoint",
                detail: format!("input len {} vs output dim {}", y.len(), self.output_dim()),
            });
        }
        Ok(match &self.kind {
            Kind::Identity => y.to_vec(),
            Kind::Mask { keep } => {
                let mut x = vec![0.0f32; self.input_dim()];
                for (v, &i) in y.iter().zip(keep) {
                    x[i] = *v;
                }
                x
            }
            Kind::Blur { kernel, k } => {
                convolve_circular(y, self.input_shape[0], self.input_shape[1], kernel, *k, true)
            }
        })
    }

    /// Apply to each row of an [n, d] tensor.
    pub fn apply_rows(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.rows();
        let m = self.output_dim();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            out.extend(self.apply(x.row(i))?);
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    /// Dense f64 matrix form, for the analytic posterior oracles.
    pub fn to_matrix(&self) -> Result<Vec<f64>> {
        let (d, m) = (self.input_dim(), self.output_dim());
        let mut mat = vec![0.0f64; m * d];
        let mut e = vec![0.0f32; d];
        for j in 0..d {
            e[j] = 1.0;
            let col = self.apply(&e)?;
            e[j] = 0.0;
            for i in 0..m {
                mat[i * d + j] = col[i] as f64;
            }
        }
        Ok(mat)
    }
}

/// Circular convolution (or correlation, for the adjoint) of an h x w image
/// with an odd k x k kernel.
fn convolve_circular(x: &[f32], h: usize, w: usize, kernel: &[f32], k: usize, flip: bool) -> Vec<f32> {
    let half = (k / 2) as i64;
    let mut out = vec![0.0f32; h * w];
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            let mut acc = 0.0f32;
            for dy in -half..=half {
                for dx in -half..=half {
                    let kv = if flip {
                        kernel[((half - dy) as usize) * k + (half - dx) as usize]
                    } else {
                        kernel[((dy + half) as usize) * k + (dx + half) as usize]
                    };
                    let yy = (i - dy).rem_euclid(h as i64) as usize;
                    let xx = (j - dx).rem_euclid(w as i64) as usize;
                    acc += kv * x[yy * w + xx];
                }
            }
            out[(i as usize) * w + j as usize] = acc;
        }
    }
    out
}

/// y = A(x) + sigma * z, z ~ N(0, I).
pub fn corrupt(x: &[f32], op: &ForwardOperator, sigma: f32, rng: &mut impl Rng) -> Result<Vec<f32>> {
    if sigma < 0.0 {
        return Err(Error::InvalidArgument("noise sigma must be >= 0".into()));
    }
    let mut y = op.apply(x)?;
    if sigma > 0.0 {
        for v in &mut y {
            *v += sigma * rng.sample::<f32, _>(StandardNormal);
        }
    }
    Ok(y)
}

/// Squared L2 data-consistency loss ||y - A(x0_hat)||^2.
pub fn data_loss(y: &[f32], x0_hat: &[f32], op: &ForwardOperator) -> Result<f32> {
    let ax = op.apply(x0_hat)?;
    if ax.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "data_loss",
            detail: format!("y len {} vs A(x) len {}", y.len(), ax.len()),
        });
    }
    Ok(y.iter().zip(&ax).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// One corrupted measurement with its operator and noise level.
#[derive(Clone, Debug)]
pub struct Observation {
    pub y: Vec<f32>,
    pub op: ForwardOperator,
    pub sigma: f32,
}

/// A set of observations sharing a task descriptor, with held-out ground
/// truth for evaluation only.
#[derive(Clone, Debug)]
pub struct ObservationSet {
    pub items: Vec<Observation>,
    pub ground_truth: Option<Tensor>,
    pub seed: u64,
    pub kind: String,
    /// Blur tasks record the kernel sigma so reload rebuilds the operator.
    pub blur_sigma: Option<f64>,
    /// Extra mask streams drawn to replace all-masked degenerate bitmaps.
    pub mask_resamples: u64,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn signal_dim(&self) -> usize {
        self.items.first().map(|o| o.op.input_dim()).unwrap_or(0)
    }
}
