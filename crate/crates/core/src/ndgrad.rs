//! Small dense networks with exact reverse-mode gradients.
//!
//! Parameters of a [`DenseNet`] live in one flat buffer. Layer `l` stores its
//! weight matrix (row-major, `out x in`) followed by its bias vector. Gradients
//! use the same layout, so optimizers operate on plain slices.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Version tag written into every checkpoint file.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Linear => v,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

/// Fully connected network; hidden layers share one activation, the output
/// layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

/// Values recorded by [`DenseNet::forward_tape`]: the input and the output of
/// every layer.
#[derive(Debug, Clone)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape holds at least the input")
    }
}

impl DenseNet {
    /// Randomly initialised network (Glorot-uniform weights, zero biases).
    pub fn new<R: Rng + ?Sized>(widths: &[usize], hidden: Activation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths, hidden)?;
        let mut offset = 0;
        for l in 0..net.num_layers() {
            let (n_in, n_out) = (net.widths[l], net.widths[l + 1]);
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            for w in &mut net.params[offset..offset + n_in * n_out] {
                *w = rng.random_range(-bound..bound);
            }
            offset += n_in * n_out + n_out;
        }
        Ok(net)
    }

    /// Network with every parameter set to zero.
    pub fn zeros(widths: &[usize], hidden: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(contract(format!("invalid layer widths {widths:?}")));
        }
        let n_layers = widths.len() - 1;
        let mut activations = vec![hidden; n_layers];
        activations[n_layers - 1] = Activation::Linear;
        let n_params = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            widths: widths.to_vec(),
            activations,
            params: vec![0.0; n_params],
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(contract(format!(
                "parameter length {} does not match network ({})",
                params.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Mutable view of the bias vector of the last layer.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let n_out = self.output_dim();
        let len = self.params.len();
        &mut self.params[len - n_out..]
    }

    /// Layer that owns the flat parameter index `idx`.
    pub fn layer_of(&self, idx: usize) -> usize {
        let mut offset = 0;
        for l in 0..self.num_layers() {
            offset += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
            if idx < offset {
                return l;
            }
        }
        self.num_layers() - 1
    }

    /// Fails with the offending layer index when any gradient entry is not finite.
    pub fn check_finite(&self, grads: &[f64]) -> Result<()> {
        match grads.iter().position(|g| !g.is_finite()) {
            None => Ok(()),
            Some(idx) => Err(Error::Numeric {
                layer: self.layer_of(idx),
                msg: format!("gradient entry {idx} is {}", grads[idx]),
            }),
        }
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.input_dim());
        let mut cur = input.to_vec();
        let mut offset = 0;
        for l in 0..self.num_layers() {
            cur = self.layer_forward(l, offset, &cur);
            offset += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        cur
    }

    pub fn forward_tape(&self, input: &[f64]) -> Tape {
        debug_assert_eq!(input.len(), self.input_dim());
        let mut acts = Vec::with_capacity(self.widths.len());
        acts.push(input.to_vec());
        let mut offset = 0;
        for l in 0..self.num_layers() {
            let next = self.layer_forward(l, offset, &acts[l]);
            acts.push(next);
            offset += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        Tape { acts }
    }

    fn layer_forward(&self, l: usize, offset: usize, x: &[f64]) -> Vec<f64> {
        let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
        let w = &self.params[offset..offset + n_in * n_out];
        let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
        let act = self.activations[l];
        (0..n_out)
            .map(|o| {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                act.apply(z)
            })
            .collect()
    }

    /// Reverse pass. Accumulates parameter gradients into `grads` (same layout
    /// as the parameters) and returns the gradient with respect to the input.
    pub fn backward(&self, tape: &Tape, grad_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer shape");
        assert_eq!(grad_out.len(), self.output_dim(), "output adjoint shape");
        let mut offsets = Vec::with_capacity(self.num_layers());
        let mut offset = 0;
        for l in 0..self.num_layers() {
            offsets.push(offset);
            offset += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        let mut delta = grad_out.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let act = self.activations[l];
            let y = &tape.acts[l + 1];
            let x = &tape.acts[l];
            for o in 0..n_out {
                delta[o] *= act.derivative_from_output(y[o]);
            }
            let off = offsets[l];
            let mut grad_in = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let g_row = &mut grads[off + o * n_in..off + (o + 1) * n_in];
                for i in 0..n_in {
                    g_row[i] += d * x[i];
                }
                grads[off + n_in * n_out + o] += d;
                let w_row = &self.params[off + o * n_in..off + (o + 1) * n_in];
                for i in 0..n_in {
                    grad_in[i] += d * w_row[i];
                }
            }
            delta = grad_in;
        }
        delta
    }
}

/// Rescales `grads` so that their joint Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Fixed adaptive-moment hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Optimizer state for one flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    kind: OptimizerKind,
    hyper: AdamHyper,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        Self {
            kind,
            hyper: AdamHyper::default(),
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn adam(n_params: usize) -> Self {
        Self::new(OptimizerKind::Adam, n_params)
    }

    pub fn sgd(n_params: usize) -> Self {
        Self::new(OptimizerKind::Sgd, n_params)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// One descent step `params <- params - lr * update(grads)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(contract(format!(
                "optimizer shape mismatch: params {}, grads {}, state {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if let Some(idx) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric {
                layer: 0,
                msg: format!("gradient entry {idx} is {}", grads[idx]),
            });
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let AdamHyper { beta1, beta2, eps } = self.hyper;
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    version: u32,
    kind: String,
    payload: T,
}

/// Writes a versioned structured-text checkpoint. The file is written to a
/// temporary sibling and renamed into place.
pub fn save_checkpoint<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    let env = Envelope {
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        payload,
    };
    let text = serde_json::to_string_pretty(&env)?;
    crate::io::write_atomic(path, text.as_bytes())
}

pub fn load_checkpoint<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let env: Envelope<T> = serde_json::from_str(&text)?;
    if env.version != CHECKPOINT_VERSION {
        return Err(Error::Schema(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            env.version
        )));
    }
    if env.kind != kind {
        return Err(Error::Schema(format!(
            "checkpoint holds '{}', expected '{kind}'",
            env.kind
        )));
    }
    Ok(env.payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_loss(net: &DenseNet, x: &[f64], weights: &[f64]) -> f64 {
        net.forward(x).iter().zip(weights).map(|(o, w)| 0.5 * w * o * o).sum()
    }

    #[test]
    fn linear_unit_gradient_is_two_w() {
        let mut net = DenseNet::zeros(&[1, 1], Activation::Linear).unwrap();
        net.set_params(&[0.7, 0.0]).unwrap();
        let tape = net.forward_tape(&[1.0]);
        let out = tape.output()[0];
        let mut g = vec![0.0; 2];
        net.backward(&tape, &[2.0 * out], &mut g);
        assert!((g[0] - 2.0 * 0.7).abs() < 1e-15);
    }

    #[test]
    fn finite_difference_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for act in [Activation::Tanh, Activation::Relu] {
            let net = DenseNet::new(&[3, 5, 4, 2], act, &mut rng).unwrap();
            let x = [0.3, -0.8, 1.1];
            let wts = [1.3, -0.4];
            let tape = net.forward_tape(&x);
            let adj: Vec<f64> = tape.output().iter().zip(&wts).map(|(o, w)| w * o).collect();
            let mut g = vec![0.0; net.num_params()];
            net.backward(&tape, &adj, &mut g);
            let h = 1e-5;
            for i in 0..net.num_params() {
                let mut p = net.clone();
                p.params_mut()[i] += h;
                let up = scalar_loss(&p, &x, &wts);
                p.params_mut()[i] -= 2.0 * h;
                let dn = scalar_loss(&p, &x, &wts);
                let fd = (up - dn) / (2.0 * h);
                let denom = fd.abs().max(g[i].abs()).max(1e-6);
                assert!((fd - g[i]).abs() / denom < 1e-4, "{act:?} param {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = DenseNet::new(&[2, 3, 1], Activation::Relu, &mut rng).unwrap();
        let mut params = net.params().to_vec();
        let before = params.clone();
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut opt = Optimizer::new(kind, params.len());
            opt.step(&mut params, &vec![0.5; before.len()], 0.0).unwrap();
            assert_eq!(params, before);
        }
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let net = DenseNet::zeros(&[2, 3, 1], Activation::Relu).unwrap();
        let mut g = vec![0.0; net.num_params()];
        let last = g.len() - 1;
        g[last] = f64::NAN;
        match net.check_finite(&g) {
            Err(Error::Numeric { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("unexpected {other:?}"),
        }
        let mut opt = Optimizer::adam(g.len());
        let mut p = net.params().to_vec();
        assert!(opt.step(&mut p, &g, 1e-3).is_err());
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut net = DenseNet::zeros(&[2, 1], Activation::Linear).unwrap();
        assert!(matches!(net.set_params(&[1.0]), Err(Error::Contract(_))));
        let mut opt = Optimizer::sgd(3);
        let mut p = vec![0.0; 3];
        assert!(opt.step(&mut p, &[0.0; 2], 0.1).is_err());
        assert!(DenseNet::zeros(&[2], Activation::Linear).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = DenseNet::new(&[4, 7, 3], Activation::Tanh, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        save_checkpoint(&path, "dense_net", &net).unwrap();
        let back: DenseNet = load_checkpoint(&path, "dense_net").unwrap();
        assert_eq!(back, net);
        assert!(load_checkpoint::<DenseNet>(&path, "other").is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = DenseNet::new(&[3, 8, 2], Activation::Relu, &mut rng).unwrap();
        let x = [0.1, 0.2, -0.3];
        assert_eq!(net.forward(&x), net.forward(&x));
        assert_eq!(net.forward(&x), net.forward_tape(&x).output());
    }
}
