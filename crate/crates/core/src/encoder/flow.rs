//! Affine coupling flow `f: z -> x` with exact gradients in both directions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::ndgrad::{Activation, DenseNet, Tape};

/// One affine coupling layer. Coordinates with `cond[i] == true` pass through
/// unchanged and condition the scale and shift of the others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    cond: Vec<bool>,
    scale: DenseNet,
    shift: DenseNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingFlow {
    dim: usize,
    scale_bound: f64,
    layers: Vec<CouplingLayer>,
}

#[derive(Debug, Clone)]
struct LayerTape {
    input: Vec<f64>,
    output: Vec<f64>,
    scale: Tape,
    shift: Tape,
    tanh_raw: Vec<f64>,
    s: Vec<f64>,
}

/// Recorded pass through the flow, in execution order.
#[derive(Debug, Clone)]
pub struct FlowTape {
    layers: Vec<LayerTape>,
    /// Indices into `CouplingFlow::layers`, in execution order.
    order: Vec<usize>,
    inverse: bool,
    input: Vec<f64>,
}

impl CouplingFlow {
    /// `depth` layers with alternating half-masks. The last layer of every
    /// scale and shift network starts at zero, so the initial flow is the identity.
    pub fn new<R: Rng + ?Sized>(dim: usize, depth: usize, hidden: usize, scale_bound: f64, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(contract("flow dimension must be positive"));
        }
        let mut layers = Vec::with_capacity(depth);
        for k in 0..depth {
            let cond = (0..dim).map(|i| (i + k) % 2 == 0).collect();
            let mut scale = DenseNet::new(&[dim, hidden, dim], Activation::Tanh, rng)?;
            let mut shift = DenseNet::new(&[dim, hidden, dim], Activation::Tanh, rng)?;
            zero_output_layer(&mut scale);
            zero_output_layer(&mut shift);
            layers.push(CouplingLayer { cond, scale, shift });
        }
        Ok(Self {
            dim,
            scale_bound,
            layers,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.scale.num_params() + l.shift.num_params())
            .sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.scale.params());
            out.extend_from_slice(l.shift.params());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(contract(format!(
                "flow expects {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.scale.num_params();
            l.scale.set_params(&params[off..off + n])?;
            off += n;
            let n = l.shift.num_params();
            l.shift.set_params(&params[off..off + n])?;
            off += n;
        }
        Ok(())
    }

    fn param_offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let s = off;
                let t = s + l.scale.num_params();
                off = t + l.shift.num_params();
                (s, t)
            })
            .collect()
    }

    /// Latent to data. Returns `(x, log|det df/dz|)`.
    pub fn forward(&self, z: &[f64]) -> (Vec<f64>, f64) {
        let tape = self.forward_tape(z);
        let ld = tape.log_det();
        (tape.output().to_vec(), ld)
    }

    /// Data to latent. Returns `(z, log|det df^{-1}/dx|)`.
    pub fn inverse(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let tape = self.inverse_tape(x);
        let ld = tape.log_det();
        (tape.output().to_vec(), ld)
    }

    pub fn forward_tape(&self, z: &[f64]) -> FlowTape {
        let mut cur = z.to_vec();
        let mut layers = Vec::with_capacity(self.depth());
        for layer in &self.layers {
            let lt = self.layer_pass(layer, &cur, false);
            cur = lt.output.clone();
            layers.push(lt);
        }
        FlowTape {
            layers,
            order: (0..self.depth()).collect(),
            inverse: false,
            input: z.to_vec(),
        }
    }

    pub fn inverse_tape(&self, x: &[f64]) -> FlowTape {
        let mut cur = x.to_vec();
        let mut layers = Vec::with_capacity(self.depth());
        for layer in self.layers.iter().rev() {
            let lt = self.layer_pass(layer, &cur, true);
            cur = lt.output.clone();
            layers.push(lt);
        }
        FlowTape {
            layers,
            order: (0..self.depth()).rev().collect(),
            inverse: true,
            input: x.to_vec(),
        }
    }

    fn layer_pass(&self, layer: &CouplingLayer, input: &[f64], inverse: bool) -> LayerTape {
        let u: Vec<f64> = input
            .iter()
            .zip(&layer.cond)
            .map(|(&v, &c)| if c { v } else { 0.0 })
            .collect();
        let scale = layer.scale.forward_tape(&u);
        let shift = layer.shift.forward_tape(&u);
        let mut tanh_raw = vec![0.0; self.dim];
        let mut s = vec![0.0; self.dim];
        let mut output = input.to_vec();
        for j in 0..self.dim {
            if layer.cond[j] {
                continue;
            }
            tanh_raw[j] = scale.output()[j].tanh();
            s[j] = self.scale_bound * tanh_raw[j];
            let t = shift.output()[j];
            output[j] = if inverse {
                (input[j] - t) * (-s[j]).exp()
            } else {
                input[j] * s[j].exp() + t
            };
        }
        LayerTape {
            input: input.to_vec(),
            output,
            scale,
            shift,
            tanh_raw,
            s,
        }
    }

    /// Reverse pass through a tape from [`forward_tape`](Self::forward_tape).
    /// `grad_out` is dL/dx, `grad_log_det` is dL/d(log det). Parameter
    /// gradients accumulate into `grads` (layout of [`params`](Self::params));
    /// returns dL/dz.
    pub fn backward_forward(&self, tape: &FlowTape, grad_out: &[f64], grad_log_det: f64, grads: &mut [f64]) -> Vec<f64> {
        self.backward(tape, grad_out, grad_log_det, grads, false)
    }

    /// Reverse pass through a tape from [`inverse_tape`](Self::inverse_tape).
    /// Returns dL/dx.
    pub fn backward_inverse(&self, tape: &FlowTape, grad_out: &[f64], grad_log_det: f64, grads: &mut [f64]) -> Vec<f64> {
        self.backward(tape, grad_out, grad_log_det, grads, true)
    }

    fn backward(&self, tape: &FlowTape, grad_out: &[f64], g_ld: f64, grads: &mut [f64], inverse: bool) -> Vec<f64> {
        assert_eq!(grads.len(), self.num_params(), "flow gradient buffer shape");
        let offsets = self.param_offsets();
        let mut g = grad_out.to_vec();
        for (pos, lt) in tape.layers.iter().enumerate().rev() {
            let li = tape.order[pos];
            let layer = &self.layers[li];
            let mut g_in = vec![0.0; self.dim];
            let mut g_raw = vec![0.0; self.dim];
            let mut g_t = vec![0.0; self.dim];
            for j in 0..self.dim {
                if layer.cond[j] {
                    g_in[j] = g[j];
                    continue;
                }
                let gs = if inverse {
                    let e = (-lt.s[j]).exp();
                    g_in[j] = g[j] * e;
                    g_t[j] = -g[j] * e;
                    -g[j] * lt.output[j] - g_ld
                } else {
                    let e = lt.s[j].exp();
                    g_in[j] = g[j] * e;
                    g_t[j] = g[j];
                    g[j] * lt.input[j] * e + g_ld
                };
                g_raw[j] = gs * self.scale_bound * (1.0 - lt.tanh_raw[j] * lt.tanh_raw[j]);
            }
            let (s_off, t_off) = offsets[li];
            let n_s = layer.scale.num_params();
            let n_t = layer.shift.num_params();
            let gu_s = layer.scale.backward(&lt.scale, &g_raw, &mut grads[s_off..s_off + n_s]);
            let gu_t = layer.shift.backward(&lt.shift, &g_t, &mut grads[t_off..t_off + n_t]);
            for j in 0..self.dim {
                if layer.cond[j] {
                    g_in[j] += gu_s[j] + gu_t[j];
                }
            }
            g = g_in;
        }
        g
    }
}

impl FlowTape {
    pub fn output(&self) -> &[f64] {
        self.layers.last().map_or(&self.input, |l| &l.output)
    }

    /// Log-determinant of the recorded pass (forward: `+Σ s`, inverse: `-Σ s`).
    pub fn log_det(&self) -> f64 {
        let total: f64 = self.layers.iter().map(|l| l.s.iter().sum::<f64>()).sum();
        if self.inverse {
            -total
        } else {
            total
        }
    }
}

fn zero_output_layer(net: &mut DenseNet) {
    let widths = net.widths().to_vec();
    let n = widths.len();
    let last = widths[n - 2] * widths[n - 1] + widths[n - 1];
    let len = net.num_params();
    for p in &mut net.params_mut()[len - last..] {
        *p = 0.0;
    }
}
