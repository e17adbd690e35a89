//! Time-conditioned feedforward score network.
//!
//! Input is the data vector concatenated with a sinusoidal embedding of the
//! integer timestep; output has the data dimension. Capacity (depth, width,
//! embedding size) is configuration, not architecture.

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tape::{mm_nn, sigmoid, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Tanh,
}

#[derive(Clone, Debug)]
pub struct MlpScoreNet {
    dim: usize,
    time_embed: usize,
    hidden: Vec<usize>,
    activation: Activation,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Result of a tape forward: output node plus parameter leaves in
/// `params()` order, for reading gradients after backward.
pub struct TapeForward {
    pub out: Var,
    pub param_vars: Vec<Var>,
}

impl MlpScoreNet {
    pub fn new(
        dim: usize,
        hidden: &[usize],
        time_embed: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("network dim must be >= 1".into()));
        }
        if time_embed == 0 || time_embed % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "time_embed must be a positive even number, got {time_embed}"
            )));
        }
        if hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArgument("hidden widths must be >= 1".into()));
        }
        let mut net = Self {
            dim,
            time_embed,
            hidden: hidden.to_vec(),
            activation,
            weights: Vec::new(),
            biases: Vec::new(),
        };
        let dims = net.layer_dims();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let std = 1.0 / (fan_in as f32).sqrt();
            let mut rng = stream(seed, "net-init", l as u64);
            let w = Tensor::randn(&[fan_in, fan_out], &mut rng).scale(std);
            net.weights.push(w);
            net.biases.push(Tensor::zeros(&[fan_out]));
        }
        Ok(net)
    }

    /// Layer widths from input (dim + time_embed) to output (dim).
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.dim + self.time_embed];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.dim);
        dims
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn time_embed(&self) -> usize {
        self.time_embed
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.biases[layer]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.weights[layer]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Parameters in a stable order: w0, b0, w1, b1, ...
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.weights
            .iter()
            .zip(&self.biases)
            .enumerate()
            .flat_map(|(l, (w, b))| [(format!("w{l}"), w), (format!("b{l}"), b)])
            .collect()
    }

    /// Overwrite parameters from a params()-ordered slice.
    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        let want: Vec<Vec<usize>> = self.params().iter().map(|p| p.shape().to_vec()).collect();
        if params.len() != want.len() || params.iter().zip(&want).any(|(p, w)| p.shape() != &w[..]) {
            return Err(Error::ShapeMismatch {
                op: "MlpScoreNet::set_params",
                detail: "parameter list does not match network layout".into(),
            });
        }
        for (dst, src) in self.params_mut().into_iter().zip(params) {
            *dst = src.clone();
        }
        Ok(())
    }

    /// Transformer-style sinusoidal embedding of an integer timestep.
    pub fn time_embedding(&self, t: usize) -> Vec<f32> {
        let half = self.time_embed / 2;
        let denom = (half.saturating_sub(1)).max(1) as f32;
        let mut emb = Vec::with_capacity(self.time_embed);
        for j in 0..half {
            let freq = (-(10000.0f32.ln()) * j as f32 / denom).exp();
            emb.push((t as f32 * freq).sin());
        }
        for j in 0..half {
            let freq = (-(10000.0f32.ln()) * j as f32 / denom).exp();
            emb.push((t as f32 * freq).cos());
        }
        emb
    }

    fn embed_rows(&self, ts: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(ts.len() * self.time_embed);
        for &t in ts {
            data.extend(self.time_embedding(t));
        }
        Tensor::from_parts(vec![ts.len(), self.time_embed], data)
    }

    fn check_input(&self, x: &Tensor, ts: &[usize]) -> Result<()> {
        if x.cols() != self.dim || x.rows() != ts.len() {
            return Err(Error::ShapeMismatch {
                op: "MlpScoreNet::forward",
                detail: format!(
                    "x [{}, {}] with {} timesteps, network dim {}",
                    x.rows(),
                    x.cols(),
                    ts.len(),
                    self.dim
                ),
            });
        }
        if ts.iter().any(|&t| t == 0) {
            return Err(Error::InvalidArgument("timesteps are 1-based".into()));
        }
        Ok(())
    }

    /// Batch forward without gradient recording. Same op order as
    /// [`Self::forward_tape`], so values agree bit-for-bit.
    pub fn forward(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.check_input(x, ts)?;
        let n = x.rows();
        let temb = self.embed_rows(ts);
        let mut cur = {
            let mut data = Vec::with_capacity(n * (self.dim + self.time_embed));
            for i in 0..n {
                data.extend_from_slice(x.row(i));
                data.extend_from_slice(temb.row(i));
            }
            Tensor::from_parts(vec![n, self.dim + self.time_embed], data)
        };
        let n_layers = self.n_layers();
        for l in 0..n_layers {
            let w = &self.weights[l];
            let mut out = mm_nn(cur.data(), w.data(), n, w.rows(), w.cols());
            let b = self.biases[l].data();
            for row in out.chunks_mut(w.cols()) {
                for (v, bv) in row.iter_mut().zip(b) {
                    *v += bv;
                }
            }
            if l + 1 < n_layers {
                match self.activation {
                    Activation::Silu => out.iter_mut().for_each(|v| *v *= sigmoid(*v)),
                    Activation::Tanh => out.iter_mut().for_each(|v| *v = v.tanh()),
                }
            }
            cur = Tensor::from_parts(vec![n, w.cols()], out);
        }
        if !cur.is_finite() {
            return Err(Error::NonFinite { op: "MlpScoreNet::forward" });
        }
        Ok(cur)
    }

    /// Single-timestep batch forward (every row at the same t).
    pub fn forward_t(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        self.forward(x, &vec![t; x.rows()])
    }

    /// Tape-recorded forward for training and likelihood gradients.
    /// `dropout` keeps each hidden activation with probability 1-p,
    /// rescaling survivors by 1/(1-p).
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        ts: &[usize],
        dropout: Option<(f32, &mut ChaCha8Rng)>,
    ) -> Result<TapeForward> {
        self.check_input(tape.value(x), ts)?;
        let temb = tape.leaf(self.embed_rows(ts));
        let mut cur = tape.concat(x, temb)?;
        let mut param_vars = Vec::with_capacity(self.n_layers() * 2);
        let mut drop = dropout;
        let n_layers = self.n_layers();
        for l in 0..n_layers {
            let w = tape.leaf(self.weights[l].clone());
            let b = tape.leaf(self.biases[l].clone());
            param_vars.push(w);
            param_vars.push(b);
            let mm = tape.matmul(cur, w)?;
            cur = tape.add_row(mm, b)?;
            if l + 1 < n_layers {
                cur = match self.activation {
                    Activation::Silu => tape.silu(cur)?,
                    Activation::Tanh => tape.tanh(cur)?,
                };
                if let Some((p, rng)) = drop.as_mut() {
                    if *p > 0.0 {
                        let keep = 1.0 - *p;
                        let shape = tape.value(cur).shape().to_vec();
                        let mask: Vec<f32> = (0..shape.iter().product::<usize>())
                            .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        let mv = tape.leaf(Tensor::from_parts(shape, mask));
                        cur = tape.mul(cur, mv)?;
                    }
                }
            }
        }
        Ok(TapeForward { out: cur, param_vars })
    }
}
