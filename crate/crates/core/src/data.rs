//! Synthetic datasets, reconstruction metrics, and the analytic posterior
//! oracle.

use crate::error::{Error, Result};
use crate::linalg;
use crate::ops::ForwardOperator;
use crate::rng::stream;
use crate::score::{GaussianPrior, GmmPrior};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    /// Soft Gaussian bumps on a mid-gray background, with random center,
    /// radius, and intensity. The gray floor keeps masked-pixel zero-fill
    /// from being a trivially good reconstruction.
    Blobs,
    /// One-pixel full-span bars on black, horizontal or vertical.
    Bars,
    /// Constant zero images.
    Background,
}

/// Background level of the blob family.
pub const BLOB_BACKGROUND: f32 = 0.3;

/// Samples are flattened row-major; `item_shape` remembers the layout.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Tensor,
    pub item_shape: Vec<usize>,
    pub kind: String,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    /// Split off the first `n` items (disjoint by index with the remainder).
    pub fn split_front(&self, n: usize) -> (Dataset, Dataset) {
        assert!(n <= self.len());
        let d = self.dim();
        let (head, tail) = self.samples.data().split_at(n * d);
        (
            Dataset {
                samples: Tensor::from_parts(vec![n, d], head.to_vec()),
                item_shape: self.item_shape.clone(),
                kind: self.kind.clone(),
                seed: self.seed,
            },
            Dataset {
                samples: Tensor::from_parts(vec![self.len() - n, d], tail.to_vec()),
                item_shape: self.item_shape.clone(),
                kind: self.kind.clone(),
                seed: self.seed,
            },
        )
    }
}

/// n i.i.d. draws from a Gaussian mixture (any dimension; the desk-scale
/// experiments use d = 2).
pub fn gen_gmm(prior: &GmmPrior, n: usize, seed: u64) -> Dataset {
    let mut rng = stream(seed, "gmm-data", 0);
    let d = prior.dim();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        data.extend(prior.sample(&mut rng));
    }
    Dataset {
        samples: Tensor::from_parts(vec![n, d], data),
        item_shape: vec![d],
        kind: "gmm".into(),
        seed,
    }
}

/// Procedural toy images with pixels in `[0,1]`, one shape per image.
pub fn gen_toyimages(h: usize, w: usize, family: ShapeFamily, n: usize, seed: u64) -> Result<Dataset> {
    if h < 4 || w < 4 {
        return Err(Error::InvalidArgument(format!("toy images need h,w >= 4, got {h}x{w}")));
    }
    let mut rng = stream(seed, "toyimage", 0);
    let d = h * w;
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let mut img = vec![0.0f32; d];
        match family {
            ShapeFamily::Background => {}
            ShapeFamily::Bars => {
                let horizontal = rng.random::<f32>() < 0.5;
                let intensity = 0.5 + 0.5 * rng.random::<f32>();
                if horizontal {
                    let row = rng.random_range(0..h);
                    for x in 0..w {
                        img[row * w + x] = intensity;
                    }
                } else {
                    let col = rng.random_range(0..w);
                    for y in 0..h {
                        img[y * w + col] = intensity;
                    }
                }
            }
            ShapeFamily::Blobs => {
                let cy = 1.0 + rng.random::<f32>() * (h as f32 - 3.0);
                let cx = 1.0 + rng.random::<f32>() * (w as f32 - 3.0);
                let radius = 0.8 + 0.8 * rng.random::<f32>();
                let intensity = 0.5 + 0.2 * rng.random::<f32>();
                for y in 0..h {
                    for x in 0..w {
                        let dy = y as f32 - cy;
                        let dx = x as f32 - cx;
                        let bump = intensity * (-(dy * dy + dx * dx) / (2.0 * radius * radius)).exp();
                        img[y * w + x] = (BLOB_BACKGROUND + bump).min(1.0);
                    }
                }
            }
        }
        data.extend(img);
    }
    Ok(Dataset {
        samples: Tensor::from_parts(vec![n, d], data),
        item_shape: vec![h, w],
        kind: format!("toyimage-{family:?}").to_lowercase(),
        seed,
    })
}

/// Reconstruction metrics between two sample sets.
#[derive(Clone, Debug)]
pub struct MetricReport {
    /// Per-item PSNR in dB; empty when the sets have different item counts.
    pub psnr: Vec<f32>,
    /// Mean over items with finite PSNR; +inf when every pair is identical.
    pub psnr_mean: Option<f32>,
    pub swd: f32,
}

/// PSNR (pairwise, when counts match) and sliced-Wasserstein distance
/// between two sets with rows as items.
pub fn evaluate_sets(
    a: &Tensor,
    b: &Tensor,
    peak: f32,
    n_projections: usize,
    seed: u64,
) -> Result<MetricReport> {
    let swd = sliced_wasserstein(a, b, n_projections, seed)?;
    let mut per_item = Vec::new();
    let mut psnr_mean = None;
    if a.rows() == b.rows() {
        let mut total = 0.0f64;
        let mut finite = 0usize;
        for i in 0..a.rows() {
            let p = psnr(a.row(i), b.row(i), peak)?;
            if p.is_finite() {
                total += p as f64;
                finite += 1;
            }
            per_item.push(p);
        }
        psnr_mean = Some(if finite == 0 {
            f32::INFINITY
        } else {
            (total / finite as f64) as f32
        });
    }
    Ok(MetricReport { psnr: per_item, psnr_mean, swd })
}

/// Peak signal-to-noise ratio in dB; identical inputs give +inf.
pub fn psnr(x: &[f32], x_ref: &[f32], peak: f32) -> Result<f32> {
    if x.len() != x_ref.len() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            detail: format!("{} vs {} elements", x.len(), x_ref.len()),
        });
    }
    if peak <= 0.0 {
        return Err(Error::InvalidArgument("psnr peak must be positive".into()));
    }
    let mse: f64 = x
        .iter()
        .zip(x_ref)
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f32::INFINITY);
    }
    Ok((10.0 * ((peak as f64).powi(2) / mse).log10()) as f32)
}

/// Sliced 2-Wasserstein distance between two sample sets: the mean over
/// random unit projections of the 1-D W2 distance between the projected
/// empirical distributions. Unequal set sizes are handled by subsampling
/// the larger set.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, n_projections: usize, seed: u64) -> Result<f32> {
    let d = a.cols();
    if d == 0 || d != b.cols() {
        return Err(Error::ShapeMismatch {
            op: "sliced_wasserstein",
            detail: format!("dims {} vs {}", a.cols(), b.cols()),
        });
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::InvalidArgument("sliced_wasserstein needs nonempty sets".into()));
    }
    if n_projections == 0 {
        return Err(Error::InvalidArgument("need at least one projection".into()));
    }
    let n = a.rows().min(b.rows());
    let mut sub_rng = stream(seed, "swd-subsample", 0);
    let pick = |t: &Tensor, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..t.rows()).collect();
        if t.rows() > n {
            idx.shuffle(rng);
            idx.truncate(n);
        }
        idx
    };
    let ia = pick(a, &mut sub_rng);
    let ib = pick(b, &mut sub_rng);

    let mut total = 0.0f64;
    for p in 0..n_projections {
        let mut rng = stream(seed, "swd-proj", p as u64);
        let mut u: Vec<f64> =
            (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        u.iter_mut().for_each(|v| *v /= norm);

        let project = |t: &Tensor, idx: &[usize]| -> Vec<f64> {
            let mut vals: Vec<f64> = idx
                .iter()
                .map(|&i| t.row(i).iter().zip(&u).map(|(x, uv)| *x as f64 * uv).sum())
                .collect();
            vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
            vals
        };
        let pa = project(a, &ia);
        let pb = project(b, &ib);
        let w2sq: f64 =
            pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
        total += w2sq.sqrt();
    }
    Ok((total / n_projections as f64) as f32)
}

/// Exact Gaussian posterior for a linear operator and Gaussian noise:
/// Sigma_p = (Sigma_0^-1 + A^T A / sigma^2)^-1,
/// mu_p = Sigma_p (Sigma_0^-1 mu_0 + A^T y / sigma^2).
pub fn gaussian_posterior_oracle(
    prior: &GaussianPrior,
    op: &ForwardOperator,
    y: &[f32],
    sigma: f32,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if sigma <= 0.0 {
        return Err(Error::InvalidArgument("posterior oracle needs sigma > 0".into()));
    }
    let d = prior.dim();
    if op.input_dim() != d || y.len() != op.output_dim() {
        return Err(Error::ShapeMismatch {
            op: "gaussian_posterior_oracle",
            detail: format!(
                "prior d={d}, operator {}->{}, y len {}",
                op.input_dim(),
                op.output_dim(),
                y.len()
            ),
        });
    }
    let m = op.output_dim();
    let cov0: Vec<f64> = prior.cov().iter().map(|&v| v as f64).collect();
    let prec0 = linalg::spd_inverse(d, &cov0)?;
    let a = op.to_matrix()?;
    let at = linalg::transpose(m, d, &a);
    let ata = linalg::mat_mul(&at, &a, d, m, d);
    let s2 = (sigma as f64) * (sigma as f64);
    let mut prec_post = vec![0.0f64; d * d];
    for i in 0..d * d {
        prec_post[i] = prec0[i] + ata[i] / s2;
    }
    let cov_post = linalg::spd_inverse(d, &prec_post)?;

    let mu0: Vec<f64> = prior.mean().iter().map(|&v| v as f64).collect();
    let y64: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let mut rhs = linalg::mat_vec(d, d, &prec0, &mu0);
    let aty = linalg::mat_vec(d, m, &at, &y64);
    for i in 0..d {
        rhs[i] += aty[i] / s2;
    }
    let mean = linalg::mat_vec(d, d, &cov_post, &rhs);
    Ok((mean, cov_post))
}
