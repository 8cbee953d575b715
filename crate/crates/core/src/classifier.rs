//! Diagnosis head: completed state -> (p_N, p_P), trained by class-weighted
//! cross-entropy on states the policy visits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{contract, Error, Result};
use crate::ndgrad::{Activation, DenseNet, Optimizer, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightedCeConfig {
    pub weight_negative: f64,
    pub weight_positive: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub optimizer: OptimizerKind,
}

impl Default for WeightedCeConfig {
    fn default() -> Self {
        Self {
            weight_negative: 1.0,
            weight_positive: 5.0,
            learning_rate: 5e-4,
            batch_size: 256,
            hidden: 64,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl WeightedCeConfig {
    pub fn validate(&self) -> Result<()> {
        let (wn, wp) = (self.weight_negative, self.weight_positive);
        if !(wn >= 0.0 && wp >= 0.0) || !(wn > 0.0 || wp > 0.0) {
            return Err(Error::Spec(format!("class weights ({wn}, {wp}) must be non-negative, one positive")));
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Spec("classifier batch size and width must be positive".into()));
        }
        Ok(())
    }

    fn weight(&self, label: Label) -> f64 {
        match label {
            Label::N => self.weight_negative,
            Label::P => self.weight_positive,
        }
    }
}

/// Three-layer ReLU network with two output logits `(N, P)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub net: DenseNet,
}

fn softmax2(logits: &[f64]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

impl Classifier {
    pub fn new(dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            net: DenseNet::new(&[dim, hidden, hidden, 2], Activation::Relu, &mut rng)?,
        })
    }

    /// All parameters zero: predicts (0.5, 0.5) everywhere.
    pub fn zeros(dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            net: DenseNet::zeros(&[dim, hidden, hidden, 2], Activation::Relu)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.net.forward(x)
    }

    /// `(p_N, p_P)`.
    pub fn predict_proba(&self, x: &[f64]) -> [f64; 2] {
        softmax2(&self.net.forward(x))
    }
}

/// Mean weighted cross-entropy of a batch and its parameter gradient.
pub fn ce_loss_and_grad(clf: &Classifier, batch: &[(Vec<f64>, Label)], cfg: &WeightedCeConfig) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(contract("empty classifier minibatch"));
    }
    let inv_n = 1.0 / batch.len() as f64;
    let mut grads = vec![0.0; clf.net.num_params()];
    let mut loss = 0.0;
    for (x, label) in batch {
        let tape = clf.net.forward_tape(x);
        let logits = tape.output();
        let m = logits[0].max(logits[1]);
        let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
        let y = usize::from(label.is_positive());
        let w = cfg.weight(*label);
        loss += w * (lse - logits[y]);
        let p = softmax2(logits);
        let mut g = [w * p[0] * inv_n, w * p[1] * inv_n];
        g[y] -= w * inv_n;
        clf.net.backward(&tape, &g, &mut grads);
    }
    Ok((loss * inv_n, grads))
}

/// Owns the optimizer state of a classifier across training steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainer {
    pub config: WeightedCeConfig,
    optimizer: Optimizer,
}

impl ClassifierTrainer {
    pub fn new(clf: &Classifier, config: WeightedCeConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: Optimizer::new(config.optimizer, clf.net.num_params()),
            config,
        })
    }

    /// One gradient step on the batch; returns the pre-step loss.
    pub fn step(&mut self, clf: &mut Classifier, batch: &[(Vec<f64>, Label)]) -> Result<f64> {
        let (loss, grads) = ce_loss_and_grad(clf, batch, &self.config)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                batch: 0,
                msg: format!("classifier loss is {loss}"),
            });
        }
        clf.net.check_finite(&grads)?;
        self.optimizer.step(clf.net.params_mut(), &grads, self.config.learning_rate)?;
        Ok(loss)
    }
}

/// Convenience wrapper matching the single-step training contract.
pub fn ce_train_step(clf: &mut Classifier, trainer: &mut ClassifierTrainer, batch: &[(Vec<f64>, Label)]) -> Result<f64> {
    trainer.step(clf, batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_network_is_uniform() {
        let clf = Classifier::zeros(3, 8).unwrap();
        assert_eq!(clf.predict_proba(&[1.0, -2.0, 3.0]), [0.5, 0.5]);
    }

    #[test]
    fn softmax_arithmetic() {
        let p = softmax2(&[0.0, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn probabilities_in_open_interval() {
        let clf = Classifier::new(4, 16, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let p = clf.predict_proba(&x);
            assert!(p[0] > 0.0 && p[0] < 1.0 && p[1] > 0.0 && p[1] < 1.0);
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_correct_predictions_have_near_zero_loss() {
        let mut clf = Classifier::zeros(1, 2).unwrap();
        clf.net.output_bias_mut().copy_from_slice(&[-30.0, 30.0]);
        let cfg = WeightedCeConfig { weight_positive: 1.0, ..Default::default() };
        let (loss, _) = ce_loss_and_grad(&clf, &[(vec![0.0], Label::P)], &cfg).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn doubling_weights_doubles_loss_and_gradient() {
        let clf = Classifier::new(3, 6, 2).unwrap();
        let batch = vec![(vec![0.1, 0.2, 0.3], Label::P), (vec![-1.0, 0.5, 2.0], Label::N)];
        let cfg = WeightedCeConfig::default();
        let doubled = WeightedCeConfig {
            weight_negative: 2.0 * cfg.weight_negative,
            weight_positive: 2.0 * cfg.weight_positive,
            ..cfg.clone()
        };
        let (l1, g1) = ce_loss_and_grad(&clf, &batch, &cfg).unwrap();
        let (l2, g2) = ce_loss_and_grad(&clf, &batch, &doubled).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((b - 2.0 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let clf = Classifier::new(3, 6, 4).unwrap();
        let batch = vec![(vec![0.4, -0.2, 0.9], Label::P), (vec![-1.0, 0.5, 0.3], Label::N)];
        let cfg = WeightedCeConfig::default();
        let (_, g) = ce_loss_and_grad(&clf, &batch, &cfg).unwrap();
        let h = 1e-5;
        for i in 0..g.len() {
            let mut c = clf.clone();
            c.net.params_mut()[i] += h;
            let up = ce_loss_and_grad(&c, &batch, &cfg).unwrap().0;
            c.net.params_mut()[i] -= 2.0 * h;
            let dn = ce_loss_and_grad(&c, &batch, &cfg).unwrap().0;
            let fd = (up - dn) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1e-6);
            assert!((fd - g[i]).abs() / denom < 1e-4, "param {i}");
        }
    }

    #[test]
    fn invalid_weights_rejected() {
        let cfg = WeightedCeConfig { weight_negative: 0.0, weight_positive: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = WeightedCeConfig { weight_negative: -1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
