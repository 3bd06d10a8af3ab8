//! Gaussian-process regression on region averages.
//!
//! Observations are noisy averages of the latent effect function over boxes.
//! Each observation carries its own noise standard deviation (the disclosed
//! privacy noise); the hyperparameters add a latent noise on top of it,
//! scaled per observation by `latent_weight` (1 unless set).

pub mod kernel;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::domain::{check_dim, Region};
use crate::error::{Error, Result};

pub use kernel::{avg_kernel, avg_kernel_1d, g_fn, se_kernel};

/// Relative diagonal jitter added before factorization.
pub const JITTER: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    /// α: prior variance of the latent function.
    pub amplitude_sq: f64,
    /// One lengthscale per covariate dimension.
    pub lengthscales: Vec<f64>,
    /// Latent noise standard deviation added to every observation.
    pub noise_sd: f64,
}

impl GpHyperparams {
    pub fn new(amplitude_sq: f64, lengthscales: Vec<f64>, noise_sd: f64) -> Result<Self> {
        if !(amplitude_sq > 0.0 && amplitude_sq.is_finite()) {
            return Err(Error::InvalidConfig(format!("amplitude_sq must be > 0, got {amplitude_sq}")));
        }
        if lengthscales.is_empty() || lengthscales.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidConfig(format!("lengthscales must be > 0, got {lengthscales:?}")));
        }
        if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_sd must be >= 0, got {noise_sd}")));
        }
        Ok(GpHyperparams { amplitude_sq, lengthscales, noise_sd })
    }

    /// Shared lengthscale across `dim` dimensions.
    pub fn isotropic(amplitude_sq: f64, lengthscale: f64, dim: usize, noise_sd: f64) -> Result<Self> {
        GpHyperparams::new(amplitude_sq, vec![lengthscale; dim], noise_sd)
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }
}

/// Noisy average of the effect function over a region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionObservation {
    pub region: Region,
    pub value: f64,
    pub noise_sd: f64,
    /// Multiplier on the latent noise variance for this observation.
    #[serde(default = "unit_weight")]
    pub latent_weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl RegionObservation {
    pub fn new(region: Region, value: f64, noise_sd: f64) -> Result<Self> {
        if let Some(dim) = region.degenerate_dim() {
            let s = region.sides[dim];
            return Err(Error::DegenerateRegion { dim, lo: s.lo, hi: s.hi });
        }
        if !(noise_sd >= 0.0) || !value.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "observation needs finite value and noise_sd >= 0 (value {value}, noise_sd {noise_sd})"
            )));
        }
        Ok(RegionObservation { region, value, noise_sd, latent_weight: 1.0 })
    }

    /// Scales the latent noise variance, e.g. by `1/n_t + 1/n_c` when the
    /// latent noise is read as a per-row standard deviation.
    pub fn with_latent_weight(mut self, weight: f64) -> Result<Self> {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::InvalidConfig(format!("latent weight must be finite and >= 0, got {weight}")));
        }
        self.latent_weight = weight;
        Ok(self)
    }
}

/// `K[i][j] = avg_kernel(r_i, r_j)`.
pub fn gram_matrix(observations: &[RegionObservation], theta: &GpHyperparams) -> Result<DMatrix<f64>> {
    for o in observations {
        check_dim(theta.dim(), o.region.dim())?;
    }
    let n = observations.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = avg_kernel(&observations[i].region, &observations[j].region, theta)?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// `K + diag(σ_i² + w_i σ_latent²) + jitter`, factorized.
fn factorize(observations: &[RegionObservation], theta: &GpHyperparams) -> Result<Cholesky<f64, Dyn>> {
    let mut k = gram_matrix(observations, theta)?;
    let latent = theta.noise_sd * theta.noise_sd;
    for (i, o) in observations.iter().enumerate() {
        k[(i, i)] += o.noise_sd * o.noise_sd + o.latent_weight * latent + JITTER * theta.amplitude_sq;
    }
    Cholesky::new(k).ok_or(Error::NotPositiveDefinite)
}

#[derive(Debug, Clone)]
struct Factor {
    chol: Cholesky<f64, Dyn>,
    /// `(K + Σ)^{-1} y`
    weights: DVector<f64>,
}

/// Hyperparameters plus the observations conditioned on so far.
#[derive(Debug, Clone)]
pub struct GpState {
    hyper: GpHyperparams,
    observations: Vec<RegionObservation>,
    factor: Option<Factor>,
}

impl GpState {
    pub fn new(hyper: GpHyperparams) -> Self {
        GpState { hyper, observations: Vec::new(), factor: None }
    }

    /// Conditions on all `observations` at once.
    pub fn with_observations(hyper: GpHyperparams, observations: Vec<RegionObservation>) -> Result<Self> {
        let factor = if observations.is_empty() {
            None
        } else {
            let chol = factorize(&observations, &hyper)?;
            let y = DVector::from_iterator(observations.len(), observations.iter().map(|o| o.value));
            let weights = chol.solve(&y);
            Some(Factor { chol, weights })
        };
        Ok(GpState { hyper, observations, factor })
    }

    pub fn hyperparams(&self) -> &GpHyperparams {
        &self.hyper
    }

    pub fn observations(&self) -> &[RegionObservation] {
        &self.observations
    }

    pub fn dim(&self) -> usize {
        self.hyper.dim()
    }

    /// New state with one more observation; refactorizes from scratch.
    pub fn condition(&self, obs: RegionObservation) -> Result<GpState> {
        check_dim(self.dim(), obs.region.dim())?;
        let mut observations = self.observations.clone();
        observations.push(obs);
        GpState::with_observations(self.hyper.clone(), observations)
    }

    /// Same observations under different hyperparameters.
    pub fn with_hyperparams(&self, hyper: GpHyperparams) -> Result<GpState> {
        GpState::with_observations(hyper, self.observations.clone())
    }

    fn cross_cov(&self, query: &Region) -> DVector<f64> {
        DVector::from_iterator(
            self.observations.len(),
            self.observations
                .iter()
                .map(|o| kernel::avg_kernel_unchecked(query, &o.region, &self.hyper)),
        )
    }

    fn validate_query(&self, query: &Region) -> Result<()> {
        check_dim(self.dim(), query.dim())?;
        if let Some(dim) = query.degenerate_dim() {
            let s = query.sides[dim];
            return Err(Error::DegenerateRegion { dim, lo: s.lo, hi: s.hi });
        }
        Ok(())
    }

    /// Posterior mean and variance of the latent average over `query`.
    pub fn posterior_region(&self, query: &Region) -> Result<(f64, f64)> {
        self.validate_query(query)?;
        let prior = kernel::avg_kernel_unchecked(query, query, &self.hyper);
        let Some(f) = &self.factor else {
            return Ok((0.0, prior));
        };
        let ks = self.cross_cov(query);
        let mean = ks.dot(&f.weights);
        let v = f.chol.l_dirty().solve_lower_triangular(&ks).ok_or(Error::NotPositiveDefinite)?;
        let var = (prior - v.norm_squared()).max(0.0);
        Ok((mean, var))
    }

    /// Posterior mean only; skips the variance solve.
    pub fn posterior_mean(&self, query: &Region) -> Result<f64> {
        self.validate_query(query)?;
        Ok(match &self.factor {
            Some(f) => self.cross_cov(query).dot(&f.weights),
            None => 0.0,
        })
    }

    /// Posterior covariance between the averages over `a` and `b`.
    pub fn posterior_cov(&self, a: &Region, b: &Region) -> Result<f64> {
        self.validate_query(a)?;
        self.validate_query(b)?;
        let prior = kernel::avg_kernel_unchecked(a, b, &self.hyper);
        let Some(f) = &self.factor else {
            return Ok(prior);
        };
        let l = f.chol.l_dirty();
        let va = l.solve_lower_triangular(&self.cross_cov(a)).ok_or(Error::NotPositiveDefinite)?;
        let vb = l.solve_lower_triangular(&self.cross_cov(b)).ok_or(Error::NotPositiveDefinite)?;
        Ok(prior - va.dot(&vb))
    }
}

/// GP evidence `log N(y | 0, K + diag(σ²))` of the observations under `theta`.
pub fn log_marginal_likelihood(observations: &[RegionObservation], theta: &GpHyperparams) -> Result<f64> {
    if observations.is_empty() {
        return Err(Error::InvalidConfig("log marginal likelihood needs at least one observation".into()));
    }
    let chol = factorize(observations, theta)?;
    let n = observations.len();
    let y = DVector::from_iterator(n, observations.iter().map(|o| o.value));
    let alpha = chol.solve(&y);
    let half_logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
    let lml = -0.5 * y.dot(&alpha) - half_logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if lml.is_finite() {
        Ok(lml)
    } else {
        Err(Error::NotPositiveDefinite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn theta1(alpha: f64, l: f64) -> GpHyperparams {
        GpHyperparams::new(alpha, vec![l], 0.0).unwrap()
    }

    fn region1(lo: f64, hi: f64) -> Region {
        Region::from_pairs(&[(lo, hi)]).unwrap()
    }

    fn random_obs(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<RegionObservation> {
        (0..n)
            .map(|_| {
                let pairs: Vec<(f64, f64)> = (0..dim)
                    .map(|_| {
                        let lo = rng.gen_range(0.0..8.0);
                        (lo, lo + rng.gen_range(0.2..3.0))
                    })
                    .collect();
                RegionObservation::new(
                    Region::from_pairs(&pairs).unwrap(),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(0.05..0.5),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn gram_small_cases() {
        let th = theta1(2.0, 1.5);
        let r = region1(0.0, 2.0);
        let o = RegionObservation::new(r.clone(), 0.0, 0.0).unwrap();
        let k = gram_matrix(&[o.clone()], &th).unwrap();
        assert_eq!(k[(0, 0)], avg_kernel(&r, &r, &th).unwrap());
        let k = gram_matrix(&[o.clone(), o], &th).unwrap();
        assert!(k.iter().all(|v| *v == k[(0, 0)]));
    }

    #[test]
    fn gram_is_psd_on_random_regions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let th = GpHyperparams::new(1.3, vec![1.0, 2.0, 0.7], 0.0).unwrap();
        let obs = random_obs(&mut rng, 10, 3);
        let k = gram_matrix(&obs, &th).unwrap();
        assert_eq!(k, k.transpose());
        let eig = SymmetricEigen::new(k);
        assert!(eig.eigenvalues.min() >= -1e-8);
    }

    #[test]
    fn empty_state_returns_prior() {
        let th = theta1(3.0, 2.0);
        let r = region1(1.0, 4.0);
        let (m, v) = GpState::new(th.clone()).posterior_region(&r).unwrap();
        assert_eq!(m, 0.0);
        assert_eq!(v, avg_kernel(&r, &r, &th).unwrap());
    }

    #[test]
    fn noiseless_interpolation() {
        let th = theta1(1.0, 5.0);
        let r = region1(2.0, 3.0);
        let s = GpState::new(th).condition(RegionObservation::new(r.clone(), 0.7, 0.0).unwrap()).unwrap();
        let (m, v) = s.posterior_region(&r).unwrap();
        assert!((m - 0.7).abs() < 1e-8);
        assert!(v.abs() < 1e-8);
    }

    #[test]
    fn conditioning_order_and_batch_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let th = GpHyperparams::new(1.0, vec![1.5, 1.0], 0.05).unwrap();
        let obs = random_obs(&mut rng, 10, 2);
        let batch = GpState::with_observations(th.clone(), obs.clone()).unwrap();
        let mut inc = GpState::new(th.clone());
        for o in &obs {
            inc = inc.condition(o.clone()).unwrap();
        }
        let mut rev = GpState::new(th);
        for o in obs.iter().rev() {
            rev = rev.condition(o.clone()).unwrap();
        }
        for q in random_obs(&mut rng, 20, 2) {
            let (mb, vb) = batch.posterior_region(&q.region).unwrap();
            let (mi, vi) = inc.posterior_region(&q.region).unwrap();
            let (mr, vr) = rev.posterior_region(&q.region).unwrap();
            assert!((mb - mi).abs() < 1e-8 && (vb - vi).abs() < 1e-8);
            assert!((mb - mr).abs() < 1e-8 && (vb - vr).abs() < 1e-8);
        }
    }

    #[test]
    fn variance_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let th = GpHyperparams::new(2.0, vec![1.0, 1.0], 0.0).unwrap();
        let obs = random_obs(&mut rng, 8, 2);
        let queries = random_obs(&mut rng, 15, 2);
        let mut state = GpState::new(th);
        let mut prev: Vec<f64> = queries.iter().map(|q| state.posterior_region(&q.region).unwrap().1).collect();
        for o in obs {
            state = state.condition(o).unwrap();
            for (q, p) in queries.iter().zip(prev.iter_mut()) {
                let v = state.posterior_region(&q.region).unwrap().1;
                assert!(v <= *p + 1e-10);
                *p = v;
            }
        }
    }

    #[test]
    fn point_limit_converges() {
        let th = theta1(1.0, 1.0);
        let obs = vec![
            RegionObservation::new(region1(0.0, 1.0), 0.4, 0.1).unwrap(),
            RegionObservation::new(region1(1.5, 3.0), -0.3, 0.1).unwrap(),
        ];
        let s = GpState::with_observations(th, obs).unwrap();
        let at = |eps: f64| s.posterior_region(&region1(1.2, 1.2 + eps)).unwrap();
        let (a, b) = (at(1e-3), at(1e-4));
        assert!((a.0 - b.0).abs() < 1e-3 && (a.1 - b.1).abs() < 1e-3);
    }

    #[test]
    fn lml_single_observation() {
        // total variance ≈ 1, carried almost entirely by the latent noise
        let r = region1(0.0, 1e-6);
        let th = GpHyperparams::new(1e-12, vec![1.0], 1.0).unwrap();
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let o = RegionObservation::new(r.clone(), 0.0, 0.0).unwrap();
        assert!((log_marginal_likelihood(&[o], &th).unwrap() + 0.5 * ln2pi).abs() < 1e-9);
        let o = RegionObservation::new(r, 1.0, 0.0).unwrap();
        assert!((log_marginal_likelihood(&[o], &th).unwrap() + 0.5 + 0.5 * ln2pi).abs() < 1e-9);
    }

    #[test]
    fn lml_matches_dense_mvn() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let th = GpHyperparams::new(1.7, vec![1.2, 0.8], 0.1).unwrap();
        let obs = random_obs(&mut rng, 5, 2);
        // independent dense evaluation via explicit inverse and LU determinant
        let mut c = gram_matrix(&obs, &th).unwrap();
        for (i, o) in obs.iter().enumerate() {
            c[(i, i)] += o.noise_sd.powi(2) + th.noise_sd.powi(2) + JITTER * th.amplitude_sq;
        }
        let y = DVector::from_iterator(5, obs.iter().map(|o| o.value));
        let inv = c.clone().try_inverse().unwrap();
        let det = c.lu().determinant();
        let dense = -0.5 * (y.transpose() * inv * &y)[(0, 0)]
            - 0.5 * det.ln()
            - 2.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((log_marginal_likelihood(&obs, &th).unwrap() - dense).abs() < 1e-8);
    }

    #[test]
    fn degenerate_query_is_rejected() {
        let s = GpState::new(theta1(1.0, 1.0));
        assert!(s.posterior_region(&region1(1.0, 1.0)).is_err());
        assert!(RegionObservation::new(region1(1.0, 1.0), 0.0, 0.0).is_err());
    }
}
