//! Oracle helpers shared by unit and integration tests.
//!
//! Everything here is independent of the production code paths it checks:
//! finite differences run on f64 re-evaluations, and the MLP reference is a
//! straight-line f64 reimplementation of the network forward pass.

use crate::net::{Activation, MlpScoreNet};

/// Central finite-difference gradient of a scalar function, in f64.
pub fn fd_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Max component deviation normalized by the reference gradient's max
/// magnitude. A pure per-component ratio is meaningless near sign changes.
pub fn max_rel_err(got: &[f32], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g as f64 - w).abs() / scale)
        .fold(0.0, f64::max)
}

/// Straight-line f64 duplicate of [`MlpScoreNet`]'s forward pass for one row.
pub fn mlp_forward_f64(net: &MlpScoreNet, x: &[f64], t: usize) -> Vec<f64> {
    let temb: Vec<f64> = net.time_embedding(t).iter().map(|&v| v as f64).collect();
    let mut cur: Vec<f64> = x.iter().copied().chain(temb).collect();
    let dims = net.layer_dims();
    let n_layers = dims.len() - 1;
    for l in 0..n_layers {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let w = net.weight(l);
        let b = net.bias(l);
        let mut next = vec![0.0f64; fan_out];
        for (j, nj) in next.iter_mut().enumerate() {
            let mut s = b.data()[j] as f64;
            for p in 0..fan_in {
                s += cur[p] * w.data()[p * fan_out + j] as f64;
            }
            *nj = s;
        }
        if l + 1 < n_layers {
            for v in &mut next {
                *v = match net.activation() {
                    Activation::Silu => *v / (1.0 + (-*v).exp()),
                    Activation::Tanh => v.tanh(),
                };
            }
        }
        cur = next;
    }
    cur
}

/// The (noisy, timesteps, eps) triple a DSM batch would draw from `rng`;
/// lets oracle tests freeze the same randomness the loss consumed.
pub fn dsm_batch(
    x0: &crate::tensor::Tensor,
    schedule: &crate::schedule::NoiseSchedule,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (crate::tensor::Tensor, Vec<usize>, crate::tensor::Tensor) {
    crate::trainer::make_dsm_batch(x0, schedule, rng)
}

/// Sample mean and covariance (rows are observations).
pub fn mean_and_cov(samples: &crate::tensor::Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (samples.rows(), samples.cols());
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (j, v) in samples.row(i).iter().enumerate() {
            mean[j] += *v as f64;
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    for i in 0..n {
        let row = samples.row(i);
        for a in 0..d {
            let da = row[a] as f64 - mean[a];
            for b in 0..d {
                let db = row[b] as f64 - mean[b];
                cov[a * d + b] += da * db;
            }
        }
    }
    for v in &mut cov {
        *v /= (n - 1) as f64;
    }
    (mean, cov)
}
