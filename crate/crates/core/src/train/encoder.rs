//! Small fully connected encoder whose output rows are projected onto the unit sphere.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{derive_rng, stream};
use crate::config::{Activation, EncoderSpec};
use crate::error::{DsfError, Result};
use crate::scalar::norm;

/// Affine map `y = W x + b` with `W` stored row-major as `n_out x n_in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            w: vec![0.0; n_in * n_out],
            b: vec![0.0; n_out],
        }
    }

    fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * self.n_out];
        for r in 0..rows {
            let xr = &x[r * self.n_in..(r + 1) * self.n_in];
            for (o, yo) in y[r * self.n_out..(r + 1) * self.n_out]
                .iter_mut()
                .enumerate()
            {
                let wr = &self.w[o * self.n_in..(o + 1) * self.n_in];
                *yo = self.b[o] + wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        y
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w.iter_mut().chain(self.b.iter_mut())
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.w.iter().chain(self.b.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub activation: Activation,
    pub layers: Vec<Layer>,
}

/// Intermediate values kept for the backward pass.
pub struct Forward {
    rows: usize,
    /// Input to each layer (the first is the batch itself).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
    /// Norm of each raw output row.
    out_norms: Vec<f64>,
    /// Unit-norm output rows.
    pub z: Vec<f64>,
}

fn activate(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::Tanh => x.tanh(),
    }
}

fn activate_grad(a: Activation, pre: f64) -> f64 {
    match a {
        Activation::Relu => {
            if pre > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Tanh => 1.0 - pre.tanh().powi(2),
    }
}

impl Encoder {
    /// He (ReLU) or Glorot-style (tanh) Gaussian initialisation, zero biases.
    pub fn new(spec: &EncoderSpec, input_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || spec.output_dim < 2 || spec.hidden.contains(&0) {
            return Err(DsfError::config(
                "encoder",
                "layer widths must be positive and output_dim >= 2",
            ));
        }
        let mut rng = derive_rng(seed, stream::INIT, 0);
        let widths: Vec<usize> = std::iter::once(input_dim)
            .chain(spec.hidden.iter().copied())
            .chain(std::iter::once(spec.output_dim))
            .collect();
        let layers = widths
            .windows(2)
            .map(|w| {
                let mut l = Layer::zeros(w[0], w[1]);
                let gain = match spec.activation {
                    Activation::Relu => 2.0,
                    Activation::Tanh => 1.0,
                };
                let sd = (gain / w[0] as f64).sqrt();
                l.w.iter_mut()
                    .for_each(|x| *x = sd * Distribution::<f64>::sample(&StandardNormal, &mut rng));
                l
            })
            .collect();
        Ok(Self {
            activation: spec.activation,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.n_out).unwrap_or(0)
    }

    pub fn forward(&self, x: &[f64], rows: usize) -> Result<Forward> {
        if x.len() != rows * self.input_dim() {
            return Err(DsfError::DimensionMismatch {
                expected: rows * self.input_dim(),
                found: x.len(),
            });
        }
        let mut inputs = vec![x.to_vec()];
        let mut pre = Vec::new();
        let last = self.layers.len() - 1;
        let mut y = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            y = layer.forward(&inputs[k], rows);
            if k < last {
                let h = y.iter().map(|&v| activate(self.activation, v)).collect();
                pre.push(std::mem::take(&mut y));
                inputs.push(h);
            }
        }
        let p = self.output_dim();
        let mut out_norms = Vec::with_capacity(rows);
        for row in y.chunks_mut(p) {
            let n = norm(row);
            if !(n > 0.0 && n.is_finite()) {
                return Err(DsfError::NonFinite(format!("encoder output norm {n}")));
            }
            row.iter_mut().for_each(|v| *v /= n);
            out_norms.push(n);
        }
        Ok(Forward {
            rows,
            inputs,
            pre,
            out_norms,
            z: y,
        })
    }

    /// Unit-norm embeddings of `rows` inputs.
    pub fn embed(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        Ok(self.forward(x, rows)?.z)
    }

    /// Parameter gradients given `g_z`, the loss gradient with respect to the unit outputs.
    pub fn backward(&self, fwd: &Forward, g_z: &[f64]) -> Vec<Layer> {
        let p = self.output_dim();
        // through the normalisation: (I - z z^T) g / |y|
        let mut g: Vec<f64> = Vec::with_capacity(g_z.len());
        for ((gr, zr), &n) in g_z.chunks(p).zip(fwd.z.chunks(p)).zip(&fwd.out_norms) {
            let along: f64 = gr.iter().zip(zr).map(|(a, b)| a * b).sum();
            g.extend(gr.iter().zip(zr).map(|(a, b)| (a - along * b) / n));
        }
        let mut grads: Vec<Layer> = self
            .layers
            .iter()
            .map(|l| Layer::zeros(l.n_in, l.n_out))
            .collect();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let x = &fwd.inputs[k];
            let gl = &mut grads[k];
            let mut g_in = vec![0.0; fwd.rows * layer.n_in];
            for r in 0..fwd.rows {
                let xr = &x[r * layer.n_in..(r + 1) * layer.n_in];
                let gir = &mut g_in[r * layer.n_in..(r + 1) * layer.n_in];
                for o in 0..layer.n_out {
                    let go = g[r * layer.n_out + o];
                    if go == 0.0 {
                        continue;
                    }
                    gl.b[o] += go;
                    let wrow = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                    let grow = &mut gl.w[o * layer.n_in..(o + 1) * layer.n_in];
                    for i in 0..layer.n_in {
                        grow[i] += go * xr[i];
                        gir[i] += go * wrow[i];
                    }
                }
            }
            if k > 0 {
                let pre = &fwd.pre[k - 1];
                g = g_in
                    .iter()
                    .zip(pre)
                    .map(|(&gi, &pv)| gi * activate_grad(self.activation, pv))
                    .collect();
            }
        }
        grads
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.params().all(|x| x.is_finite()))
    }

    /// Heavy-ball momentum step: `v <- beta v + g`, `theta <- theta - lr v`.
    pub(crate) fn momentum_step(
        &mut self,
        velocity: &mut [Layer],
        grads: &[Layer],
        lr: f64,
        beta: f64,
    ) {
        for ((layer, vel), grad) in self.layers.iter_mut().zip(velocity.iter_mut()).zip(grads) {
            for ((w, v), g) in layer.params_mut().zip(vel.params_mut()).zip(grad.params()) {
                *v = beta * *v + g;
                *w -= lr * *v;
            }
        }
    }

    pub(crate) fn zero_like(&self) -> Vec<Layer> {
        self.layers
            .iter()
            .map(|l| Layer::zeros(l.n_in, l.n_out))
            .collect()
    }
}
