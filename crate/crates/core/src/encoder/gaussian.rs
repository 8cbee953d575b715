//! Latent Gaussian base distribution and the online EM steps run on it.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `N(mean, cov)`; `cov` is stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl LatentGaussian {
    pub fn standard(d: usize) -> Self {
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = 1.0;
        }
        Self {
            mean: vec![0.0; d],
            cov,
        }
    }

    pub fn new(mean: Vec<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(contract(format!("covariance must be {d}x{d}")));
        }
        Ok(Self {
            mean,
            cov: (0..d * d).map(|k| cov[(k / d, k % d)]).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Zero mean and the correlation matrix of `cov`.
    pub fn standardized(&self) -> Self {
        let d = self.dim();
        let sd: Vec<f64> = (0..d).map(|i| self.cov[i * d + i].sqrt()).collect();
        let mut cov = self.cov.clone();
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = if i == j { 1.0 } else { self.cov[i * d + j] / (sd[i] * sd[j]) };
            }
        }
        Self {
            mean: vec![0.0; d],
            cov,
        }
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }

    pub fn mean_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        self.cov_matrix().cholesky().ok_or_else(|| Error::Numeric {
            layer: 0,
            msg: "latent covariance is singular".into(),
        })
    }

    /// `log N(z; mean, cov)` together with `cov^{-1} (z - mean)`.
    pub fn log_pdf_and_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let chol = self.cholesky()?;
        let diff = DVector::from_column_slice(z) - self.mean_vector();
        let prec_diff = chol.solve(&diff);
        let quad = diff.dot(&prec_diff);
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let lp = -0.5 * (quad + log_det + self.dim() as f64 * LN_2PI);
        Ok((lp, prec_diff.as_slice().to_vec()))
    }

    pub fn log_pdf(&self, z: &[f64]) -> Result<f64> {
        Ok(self.log_pdf_and_grad(z)?.0)
    }

    /// Conditional mean of the unobserved block given the observed one (all
    /// coordinates returned; observed ones unchanged) and the conditional
    /// covariance of the unobserved block. `Σ_oo` is ridged until it factors.
    pub fn conditional(&self, z: &[f64], observed: &[bool]) -> (Vec<f64>, DMatrix<f64>) {
        let d = self.dim();
        let obs: Vec<usize> = (0..d).filter(|&i| observed[i]).collect();
        let mis: Vec<usize> = (0..d).filter(|&i| !observed[i]).collect();
        let cov = self.cov_matrix();
        let mut out = z.to_vec();
        if mis.is_empty() {
            return (out, DMatrix::zeros(0, 0));
        }
        let s_mm = DMatrix::from_fn(mis.len(), mis.len(), |a, b| cov[(mis[a], mis[b])]);
        if obs.is_empty() {
            for &i in &mis {
                out[i] = self.mean[i];
            }
            return (out, s_mm);
        }
        let s_oo = DMatrix::from_fn(obs.len(), obs.len(), |a, b| cov[(obs[a], obs[b])]);
        let s_mo = DMatrix::from_fn(mis.len(), obs.len(), |a, b| cov[(mis[a], obs[b])]);
        let chol = factor_with_ridge(s_oo);
        let resid = DVector::from_fn(obs.len(), |a, _| z[obs[a]] - self.mean[obs[a]]);
        let shift = &s_mo * chol.solve(&resid);
        for (a, &i) in mis.iter().enumerate() {
            out[i] = self.mean[i] + shift[a];
        }
        let cond_cov = &s_mm - &s_mo * chol.solve(&s_mo.transpose());
        (out, cond_cov)
    }

    /// Log-likelihood of the observed coordinates of each sample.
    pub fn observed_log_likelihood(&self, data: &[(Vec<f64>, Vec<bool>)]) -> Result<f64> {
        let mut total = 0.0;
        for (z, observed) in data {
            let obs: Vec<usize> = (0..self.dim()).filter(|&i| observed[i]).collect();
            if obs.is_empty() {
                continue;
            }
            let marginal = LatentGaussian {
                mean: obs.iter().map(|&i| self.mean[i]).collect(),
                cov: obs
                    .iter()
                    .flat_map(|&i| obs.iter().map(move |&j| (i, j)))
                    .map(|(i, j)| self.cov[i * self.dim() + j])
                    .collect(),
            };
            let zo: Vec<f64> = obs.iter().map(|&i| z[i]).collect();
            total += marginal.log_pdf(&zo)?;
        }
        Ok(total)
    }
}

fn factor_with_ridge(m: DMatrix<f64>) -> Cholesky<f64, Dyn> {
    let n = m.nrows();
    let mut ridge = 0.0;
    loop {
        let candidate = &m + DMatrix::identity(n, n) * ridge;
        if let Some(c) = candidate.cholesky() {
            return c;
        }
        ridge = if ridge == 0.0 { 1e-12 } else { ridge * 10.0 };
    }
}

/// Expectation step: fills unobserved coordinates with their conditional mean.
pub fn e_step(base: &LatentGaussian, z: &[f64], observed: &[bool]) -> Vec<f64> {
    base.conditional(z, observed).0
}

/// Online maximisation step. Batch moments use the completed vectors plus the
/// conditional covariance of each sample's unobserved block (computed under
/// `base`); the result is mixed with `base` by `eta` and ridged.
pub fn m_step_online(
    base: &LatentGaussian,
    batch: &[(Vec<f64>, Vec<bool>)],
    eta: f64,
    ridge: f64,
) -> Result<LatentGaussian> {
    if batch.is_empty() {
        return Err(contract("M-step on an empty batch"));
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(contract(format!("EM step size {eta} outside (0, 1]")));
    }
    let d = base.dim();
    let n = batch.len() as f64;
    let mut mean = DVector::zeros(d);
    for (z, _) in batch {
        mean += DVector::from_column_slice(z);
    }
    mean /= n;
    let mut second = DMatrix::zeros(d, d);
    for (z, observed) in batch {
        let c = DVector::from_column_slice(z) - &mean;
        second += &c * c.transpose();
        let mis: Vec<usize> = (0..d).filter(|&i| !observed[i]).collect();
        if !mis.is_empty() {
            let (_, cond_cov) = base.conditional(z, observed);
            for (a, &i) in mis.iter().enumerate() {
                for (b, &j) in mis.iter().enumerate() {
                    second[(i, j)] += cond_cov[(a, b)];
                }
            }
        }
    }
    second /= n;
    let new_mean = mean * eta + base.mean_vector() * (1.0 - eta);
    let mut new_cov = second * eta + base.cov_matrix() * (1.0 - eta);
    new_cov = (&new_cov + new_cov.transpose()) * 0.5;
    for i in 0..d {
        new_cov[(i, i)] += ridge;
    }
    LatentGaussian::new(new_mean.as_slice().to_vec(), &new_cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn bivariate(rho: f64) -> LatentGaussian {
        LatentGaussian::new(vec![0.0, 0.0], &DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0])).unwrap()
    }

    #[test]
    fn conditional_mean_bivariate() {
        let g = bivariate(0.8);
        let z = e_step(&g, &[1.0, 123.0], &[true, false]);
        assert!((z[1] - 0.8).abs() < 1e-12);
        assert_eq!(z[0], 1.0);
    }

    #[test]
    fn nothing_or_everything_observed() {
        let g = LatentGaussian::new(vec![0.5, -1.0], &DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        assert_eq!(e_step(&g, &[9.0, 9.0], &[false, false]), vec![0.5, -1.0]);
        assert_eq!(e_step(&g, &[9.0, 7.0], &[true, true]), vec![9.0, 7.0]);
    }

    #[test]
    fn standard_normal_density_at_origin() {
        let g = LatentGaussian::standard(3);
        let lp = g.log_pdf(&[0.0; 3]).unwrap();
        assert!((lp + 1.5 * LN_2PI).abs() < 1e-12);
    }

    fn sample(n: usize, seed: u64) -> Vec<(Vec<f64>, Vec<bool>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                (vec![1.0 + a, -0.5 + 0.8 * a + 0.6 * b], vec![true, true])
            })
            .collect()
    }

    #[test]
    fn full_step_on_complete_data_is_mle_plus_ridge() {
        let data = sample(500, 1);
        let g = m_step_online(&LatentGaussian::standard(2), &data, 1.0, 1e-6).unwrap();
        let n = data.len() as f64;
        let m0 = data.iter().map(|(z, _)| z[0]).sum::<f64>() / n;
        let m1 = data.iter().map(|(z, _)| z[1]).sum::<f64>() / n;
        let c01 = data.iter().map(|(z, _)| (z[0] - m0) * (z[1] - m1)).sum::<f64>() / n;
        let c00 = data.iter().map(|(z, _)| (z[0] - m0).powi(2)).sum::<f64>() / n;
        assert!((g.mean[0] - m0).abs() < 1e-12 && (g.mean[1] - m1).abs() < 1e-12);
        assert!((g.cov[1] - c01).abs() < 1e-12);
        assert!((g.cov[0] - (c00 + 1e-6)).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_when_batch_matches() {
        let data = sample(300, 2);
        let mle = m_step_online(&LatentGaussian::standard(2), &data, 1.0, 0.0).unwrap();
        let again = m_step_online(&mle, &data, 0.5, 0.0).unwrap();
        for (a, b) in mle.cov.iter().zip(&again.cov).chain(mle.mean.iter().zip(&again.mean)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn m_step_contract_errors() {
        let g = LatentGaussian::standard(2);
        assert!(m_step_online(&g, &[], 1.0, 0.0).is_err());
        assert!(m_step_online(&g, &sample(3, 0), 0.0, 0.0).is_err());
        assert!(m_step_online(&g, &sample(3, 0), 1.5, 0.0).is_err());
    }

    #[test]
    fn full_batch_em_is_monotone_with_missing_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut data = sample(400, 3);
        for (z, obs) in data.iter_mut() {
            for i in 0..2 {
                if rng.random_bool(0.2) {
                    obs[i] = false;
                    z[i] = 0.0;
                }
            }
            if !obs[0] && !obs[1] {
                obs[0] = true;
            }
        }
        let mut g = LatentGaussian::standard(2);
        let mut prev = g.observed_log_likelihood(&data).unwrap();
        for _ in 0..40 {
            let completed: Vec<(Vec<f64>, Vec<bool>)> =
                data.iter().map(|(z, o)| (e_step(&g, z, o), o.clone())).collect();
            g = m_step_online(&g, &completed, 1.0, 0.0).unwrap();
            let ll = g.observed_log_likelihood(&data).unwrap();
            assert!(ll >= prev - 1e-9, "{ll} < {prev}");
            prev = ll;
        }
    }
}
