//! Posterior state encoder: a coupling flow into a latent Gaussian, with
//! online EM in latent space. With flow depth 0 it is plain Gaussian EM
//! imputation.

mod flow;
mod gaussian;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use flow::{CouplingFlow, FlowTape};
pub use gaussian::{e_step, m_step_online, LatentGaussian};

use crate::dataset::{ObservationMask, PanelScheme, PatientRecord};
use crate::error::{contract, Error, Result};
use crate::ndgrad::{Optimizer, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    /// Weight of the squared distance to ground truth in the second flow loss.
    pub alpha: f64,
    pub batch_size: usize,
    /// Number of mini-batch iterations.
    pub iterations: usize,
    pub learning_rate: f64,
    /// Added to the latent covariance diagonal after every M-step.
    pub ridge: f64,
    pub flow_depth: usize,
    pub hidden: usize,
    /// Bound on the coupling log-scale, `|s| <= scale_bound`.
    pub scale_bound: f64,
    /// Re-imputation passes used by [`Encoder::impute`] when the flow is non-trivial.
    pub reimpute_passes: usize,
    /// Random masks drawn per pretraining record.
    pub masks_per_record: usize,
    pub optimizer: OptimizerKind,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            batch_size: 256,
            iterations: 500,
            learning_rate: 1e-3,
            ridge: 1e-6,
            flow_depth: 4,
            hidden: 64,
            scale_bound: 3.0,
            reimpute_passes: 3,
            masks_per_record: 4,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl EmConfig {
    /// Online EM step size `(1 + 0.1 t)^-0.6`, floored at 0.01.
    pub fn eta(t: usize) -> f64 {
        (1.0 + 0.1 * t as f64).powf(-0.6).max(0.01)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Spec(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.batch_size == 0 || self.masks_per_record == 0 {
            return Err(Error::Spec("batch size and masks per record must be positive".into()));
        }
        if !(self.ridge >= 0.0) || !(self.learning_rate >= 0.0) {
            return Err(Error::Spec("ridge and learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// Trained (or initial) encoder: flow parameters, latent Gaussian and config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub flow: CouplingFlow,
    pub base: LatentGaussian,
    pub config: EmConfig,
}

/// One pretraining example: ground truth, which cells are known in the
/// source, and which cells the encoder is allowed to see.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub truth: Vec<f64>,
    pub truth_known: Vec<bool>,
    pub observed: Vec<bool>,
}

impl TrainingSample {
    pub fn from_record(record: &PatientRecord, mask: &ObservationMask) -> Self {
        let observed = mask
            .bits
            .iter()
            .zip(&record.source_missing)
            .map(|(&m, &miss)| m && !miss)
            .collect();
        Self {
            truth: record.features.clone(),
            truth_known: record.source_missing.iter().map(|m| !m).collect(),
            observed,
        }
    }
}

/// Per-iteration losses recorded by [`pretrain`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
}

impl Encoder {
    /// Identity flow and standard-normal base.
    pub fn new(dim: usize, config: EmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flow = CouplingFlow::new(dim, config.flow_depth, config.hidden, config.scale_bound, &mut rng)?;
        Ok(Self {
            flow,
            base: LatentGaussian::standard(dim),
            config,
        })
    }

    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    /// Negative log-density of `x` under the flow pushforward of the base.
    pub fn nll(&self, x: &[f64]) -> Result<f64> {
        let (z, ld_inv) = self.flow.inverse(x);
        Ok(-self.base.log_pdf(&z)? - ld_inv)
    }

    /// Completes `x` on the unobserved coordinates. Observed coordinates are
    /// returned bit-for-bit.
    pub fn impute(&self, x: &[f64], observed: &[bool]) -> Result<Vec<f64>> {
        let d = self.dim();
        if x.len() != d || observed.len() != d {
            return Err(contract(format!("impute expects length {d}, got {} / {}", x.len(), observed.len())));
        }
        if x.iter().zip(observed).any(|(v, &o)| o && !v.is_finite()) {
            return Err(contract("non-finite observed value"));
        }
        if observed.iter().all(|&o| o) {
            return Ok(x.to_vec());
        }
        let mut cur: Vec<f64> = x.to_vec();
        if self.flow.depth() > 0 {
            let (start, _) = self.flow.forward(&self.base.mean);
            for i in 0..d {
                if !observed[i] {
                    cur[i] = start[i];
                }
            }
        }
        let passes = if self.flow.depth() == 0 { 1 } else { self.config.reimpute_passes.max(1) };
        for _ in 0..passes {
            let (z, _) = self.flow.inverse(&cur);
            let z_hat = e_step(&self.base, &z, observed);
            let (x_tilde, _) = self.flow.forward(&z_hat);
            for i in 0..d {
                if !observed[i] {
                    cur[i] = x_tilde[i];
                }
            }
        }
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                layer: 0,
                msg: "imputation produced a non-finite value".into(),
            });
        }
        Ok(cur)
    }
}

/// Mean negative log-likelihood of a batch under the flow pushforward of
/// `base`, with its gradient over the flow parameters.
pub fn nll_loss(flow: &CouplingFlow, base: &LatentGaussian, batch: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(contract("empty batch"));
    }
    let mut grads = vec![0.0; flow.num_params()];
    let mut total = 0.0;
    let inv_n = 1.0 / batch.len() as f64;
    for x in batch {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(contract("non-finite vector in NLL batch"));
        }
        let tape = flow.inverse_tape(x);
        let (lp, prec_diff) = base.log_pdf_and_grad(tape.output())?;
        total += -lp - tape.log_det();
        // d(-log N(z))/dz = Σ^{-1}(z - μ); d(-log det)/d(log det) = -1.
        let gz: Vec<f64> = prec_diff.iter().map(|g| g * inv_n).collect();
        flow.backward_inverse(&tape, &gz, -inv_n, &mut grads);
    }
    Ok((total * inv_n, grads))
}

/// Second flow loss: NLL of the decoded batch `x̃ = f(ẑ)` plus `alpha` times
/// the squared distance of `f(ẑ)` to the known ground-truth cells. Returns the
/// loss, its gradient and the decoded vectors.
///
/// In the NLL term `x̃` is held fixed and only the density model moves.
/// Differentiating through `x̃` as well would cancel the latent density and
/// leave `log|det df/dz|`, which the flow can lower without bound by
/// contracting. The distance term is differentiated through the decoder.
pub fn regularized_loss(
    flow: &CouplingFlow,
    base: &LatentGaussian,
    latent: &[Vec<f64>],
    truth: &[(Vec<f64>, Vec<bool>)],
    alpha: f64,
) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    if latent.is_empty() || latent.len() != truth.len() {
        return Err(contract("latent and truth batches must be non-empty and aligned"));
    }
    let mut grads = vec![0.0; flow.num_params()];
    let mut decoded = Vec::with_capacity(latent.len());
    let mut dist = 0.0;
    let inv_n = 1.0 / latent.len() as f64;
    for (z, (x, known)) in latent.iter().zip(truth) {
        let tape = flow.forward_tape(z);
        let x_tilde = tape.output().to_vec();
        let mut gx = vec![0.0; x_tilde.len()];
        for i in 0..x_tilde.len() {
            if known[i] {
                let r = x_tilde[i] - x[i];
                dist += alpha * r * r;
                gx[i] = 2.0 * alpha * r * inv_n;
            }
        }
        if alpha > 0.0 {
            flow.backward_forward(&tape, &gx, 0.0, &mut grads);
        }
        decoded.push(x_tilde);
    }
    let (nll, g_nll) = nll_loss(flow, base, &decoded)?;
    for (g, h) in grads.iter_mut().zip(&g_nll) {
        *g += h;
    }
    Ok((nll + dist * inv_n, grads, decoded))
}

/// Supervised EMFlow-style pretraining. Each iteration takes one mini-batch
/// of the current imputations and
/// 1. takes a gradient step on the batch NLL,
/// 2. maps the batch to latent space, runs the E-step under the previous base
///    and the online M-step,
/// 3. decodes, takes a gradient step on NLL + alpha * distance to ground truth,
///    and writes the decoded values back into the unobserved cells.
pub fn pretrain(encoder: &mut Encoder, samples: &[TrainingSample], seed: u64) -> Result<PretrainLog> {
    let cfg = encoder.config.clone();
    cfg.validate()?;
    if samples.is_empty() {
        return Err(contract("no pretraining samples"));
    }
    let d = encoder.dim();
    if samples.iter().any(|s| s.truth.len() != d || s.observed.len() != d || s.truth_known.len() != d) {
        return Err(contract(format!("pretraining samples must have dimension {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut imputed: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            s.truth
                .iter()
                .zip(&s.observed)
                .enumerate()
                .map(|(i, (&v, &o))| if o { v } else { encoder.base.mean[i] })
                .collect()
        })
        .collect();
    let batch_size = cfg.batch_size.min(samples.len());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = Optimizer::new(cfg.optimizer, encoder.flow.num_params());
    let mut log = PretrainLog::default();
    for t in 1..=cfg.iterations {
        if cursor + batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx: Vec<usize> = order[cursor..cursor + batch_size].to_vec();
        cursor += batch_size;

        let diverged = |msg: &str| Error::Training { batch: t, msg: msg.to_string() };

        // Flow step on the current imputations.
        if encoder.flow.depth() > 0 {
            let batch: Vec<Vec<f64>> = idx.iter().map(|&i| imputed[i].clone()).collect();
            let (l1, grads) = nll_loss(&encoder.flow, &encoder.base, &batch)?;
            if !l1.is_finite() {
                return Err(diverged("first flow loss is not finite"));
            }
            let mut params = encoder.flow.params();
            opt.step(&mut params, &grads, cfg.learning_rate)?;
            encoder.flow.set_params(&params)?;
            log.l1.push(l1);
        }

        // Online EM in latent space.
        let mut completed = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (z, _) = encoder.flow.inverse(&imputed[i]);
            completed.push((e_step(&encoder.base, &z, &samples[i].observed), samples[i].observed.clone()));
        }
        encoder.base = m_step_online(&encoder.base, &completed, EmConfig::eta(t), cfg.ridge)?;
        if encoder.flow.depth() > 0 {
            // The flow can absorb any affine map of the latent, so pin location
            // and scale here and let EM learn only the correlations.
            encoder.base = encoder.base.standardized();
        }

        // Decode, regularised flow step, write back.
        let latent: Vec<Vec<f64>> = completed.into_iter().map(|(z, _)| z).collect();
        let truth: Vec<(Vec<f64>, Vec<bool>)> = idx
            .iter()
            .map(|&i| (samples[i].truth.clone(), samples[i].truth_known.clone()))
            .collect();
        let (l2, grads, decoded) = regularized_loss(&encoder.flow, &encoder.base, &latent, &truth, cfg.alpha)?;
        if !l2.is_finite() {
            return Err(diverged("regularised flow loss is not finite"));
        }
        log.l2.push(l2);
        for (&i, x_tilde) in idx.iter().zip(&decoded) {
            for j in 0..d {
                if !samples[i].observed[j] {
                    imputed[i][j] = x_tilde[j];
                }
            }
        }
        if encoder.flow.depth() > 0 {
            let mut params = encoder.flow.params();
            opt.step(&mut params, &grads, cfg.learning_rate)?;
            encoder.flow.set_params(&params)?;
        }
    }
    Ok(log)
}

/// Builds pretraining samples from records with random panel masks.
pub fn augmented_samples(records: &[PatientRecord], scheme: &PanelScheme, copies: usize, seed: u64) -> Result<Vec<TrainingSample>> {
    let masked = crate::dataset::random_mask_augment(records, scheme, copies, seed)?;
    Ok(records
        .iter()
        .flat_map(|r| std::iter::repeat_n(r, copies))
        .zip(&masked)
        .map(|(r, (_, m))| TrainingSample::from_record(r, m))
        .collect())
}

/// Root-mean-square error of `impute` over the unobserved, known cells.
pub fn imputation_rmse(encoder: &Encoder, samples: &[TrainingSample]) -> Result<f64> {
    let mut se = 0.0;
    let mut n = 0usize;
    for s in samples {
        let x: Vec<f64> = s.truth.iter().zip(&s.observed).map(|(&v, &o)| if o { v } else { 0.0 }).collect();
        let filled = encoder.impute(&x, &s.observed)?;
        for i in 0..x.len() {
            if !s.observed[i] && s.truth_known[i] {
                se += (filled[i] - s.truth[i]).powi(2);
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { (se / n as f64).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    const LN_2PI: f64 = 1.837_877_066_409_345_3;

    fn random_flow(dim: usize, depth: usize, seed: u64) -> CouplingFlow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flow = CouplingFlow::new(dim, depth, 8, 3.0, &mut rng).unwrap();
        let p: Vec<f64> = (0..flow.num_params()).map(|_| rng.random_range(-0.5..0.5)).collect();
        flow.set_params(&p).unwrap();
        flow
    }

    fn randn(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
        (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn flow_is_invertible_with_antisymmetric_log_det() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for depth in [1, 2, 4] {
            let flow = random_flow(5, depth, depth as u64);
            for _ in 0..1000 {
                let z = randn(&mut rng, 5, 2.0);
                let (x, ld) = flow.forward(&z);
                let (z_back, ld_inv) = flow.inverse(&x);
                for (a, b) in z.iter().zip(&z_back) {
                    assert!((a - b).abs() < 1e-9);
                }
                assert!((ld + ld_inv).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identity_flow_standard_normal_nll() {
        let enc = Encoder::new(3, EmConfig { flow_depth: 0, ..EmConfig::default() }, 0).unwrap();
        assert!((enc.nll(&[0.0; 3]).unwrap() - 1.5 * LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn identity_flow_matches_closed_form_gaussian() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 0.5]);
        let base = LatentGaussian::new(vec![0.3, -1.0], &cov).unwrap();
        let enc = Encoder {
            flow: CouplingFlow::new(2, 0, 4, 3.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(),
            base,
            config: EmConfig::default(),
        };
        let x = [1.1, -0.2];
        // Closed form for the 2x2 case.
        let det: f64 = 2.0 * 0.5 - 0.36;
        let (a, b) = (x[0] - 0.3, x[1] + 1.0);
        let quad = (0.5 * a * a - 2.0 * 0.6 * a * b + 2.0 * b * b) / det;
        let expected = 0.5 * (quad + det.ln() + 2.0 * LN_2PI);
        assert!((enc.nll(&x).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn nll_two_routes_agree() {
        let flow = random_flow(4, 3, 7);
        let cov = DMatrix::from_fn(4, 4, |i, j| if i == j { 1.5 } else { 0.2 });
        let base = LatentGaussian::new(vec![0.1, 0.2, -0.3, 0.0], &cov).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let x = randn(&mut rng, 4, 1.5);
            let (z, ld_inv) = flow.inverse(&x);
            let via_inverse = -base.log_pdf(&z).unwrap() - ld_inv;
            let (_, ld_fwd) = flow.forward(&z);
            let via_forward = -base.log_pdf(&z).unwrap() + ld_fwd;
            assert!((via_inverse - via_forward).abs() < 1e-9);
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let flow = random_flow(3, 2, 11);
        let base = LatentGaussian::new(vec![0.2, -0.1, 0.4], &DMatrix::from_fn(3, 3, |i, j| if i == j { 1.2 } else { 0.3 })).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let batch: Vec<Vec<f64>> = (0..3).map(|_| randn(&mut rng, 3, 1.0)).collect();
        let (_, g) = nll_loss(&flow, &base, &batch).unwrap();
        let p0 = flow.params();
        let h = 1e-5;
        for i in 0..p0.len() {
            let mut f = flow.clone();
            let mut p = p0.clone();
            p[i] += h;
            f.set_params(&p).unwrap();
            let up = nll_loss(&f, &base, &batch).unwrap().0;
            p[i] -= 2.0 * h;
            f.set_params(&p).unwrap();
            let dn = nll_loss(&f, &base, &batch).unwrap().0;
            let fd = (up - dn) / (2.0 * h);
            assert!(rel_err(fd, g[i]) < 1e-4, "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn regularized_gradient_matches_finite_differences() {
        let flow = random_flow(3, 2, 21);
        let base = LatentGaussian::standard(3);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let latent: Vec<Vec<f64>> = (0..2).map(|_| randn(&mut rng, 3, 1.0)).collect();
        let truth: Vec<(Vec<f64>, Vec<bool>)> = (0..2).map(|_| (randn(&mut rng, 3, 1.0), vec![true, false, true])).collect();
        let (_, g, decoded) = regularized_loss(&flow, &base, &latent, &truth, 3.0).unwrap();
        // The decoded batch is data for the NLL term, so it stays frozen here.
        let loss = |f: &CouplingFlow| {
            let mut dist = 0.0;
            for (z, (x, known)) in latent.iter().zip(&truth) {
                let (xt, _) = f.forward(z);
                for i in 0..3 {
                    if known[i] {
                        dist += 3.0 * (xt[i] - x[i]).powi(2);
                    }
                }
            }
            nll_loss(f, &base, &decoded).unwrap().0 + dist / latent.len() as f64
        };
        let p0 = flow.params();
        let h = 1e-5;
        for i in 0..p0.len() {
            let mut f = flow.clone();
            let mut p = p0.clone();
            p[i] += h;
            f.set_params(&p).unwrap();
            let up = loss(&f);
            p[i] -= 2.0 * h;
            f.set_params(&p).unwrap();
            let dn = loss(&f);
            let fd = (up - dn) / (2.0 * h);
            assert!(rel_err(fd, g[i]) < 1e-4, "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn alpha_zero_reduces_to_likelihood_term() {
        let flow = random_flow(2, 2, 31);
        let base = LatentGaussian::standard(2);
        let latent = vec![vec![0.3, -0.7]];
        let truth = vec![(vec![5.0, 5.0], vec![true, true])];
        let (l2, _, decoded) = regularized_loss(&flow, &base, &latent, &truth, 0.0).unwrap();
        let (l1, _) = nll_loss(&flow, &base, &decoded).unwrap();
        assert!((l1 - l2).abs() < 1e-9);
    }

    #[test]
    fn impute_keeps_observed_and_reduces_to_e_step() {
        let base = LatentGaussian::new(vec![0.0, 0.0], &DMatrix::from_row_slice(2, 2, &[1.0, 0.8, 0.8, 1.0])).unwrap();
        let enc = Encoder {
            flow: CouplingFlow::new(2, 0, 4, 3.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(),
            base,
            config: EmConfig { flow_depth: 0, ..EmConfig::default() },
        };
        let out = enc.impute(&[1.0, 0.0], &[true, false]).unwrap();
        assert_eq!(out[0], 1.0);
        assert!((out[1] - 0.8).abs() < 1e-12);
        assert_eq!(enc.impute(&[0.25, -3.5], &[true, true]).unwrap(), vec![0.25, -3.5]);
        assert!(enc.impute(&[f64::NAN, 0.0], &[true, false]).is_err());

        let deep = Encoder {
            flow: random_flow(2, 3, 4),
            ..enc.clone()
        };
        let x = [0.123_456_789, 0.0];
        assert_eq!(deep.impute(&x, &[true, false]).unwrap()[0], x[0]);
    }

    #[test]
    fn pretrain_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<TrainingSample> = (0..64)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                TrainingSample {
                    truth: vec![a, 0.5 * a],
                    truth_known: vec![true, true],
                    observed: vec![true, rng.random_bool(0.5)],
                }
            })
            .collect();
        let cfg = EmConfig {
            iterations: 10,
            batch_size: 16,
            flow_depth: 2,
            hidden: 4,
            ..EmConfig::default()
        };
        let mut a = Encoder::new(2, cfg.clone(), 1).unwrap();
        let mut b = Encoder::new(2, cfg, 1).unwrap();
        pretrain(&mut a, &samples, 9).unwrap();
        pretrain(&mut b, &samples, 9).unwrap();
        assert_eq!(a, b);
    }
}
