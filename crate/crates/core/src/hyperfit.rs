//! Maximum-likelihood fitting of GP hyperparameters.
//!
//! Multi-start Nelder-Mead in log space over amplitude, lengthscale(s) and the
//! latent noise standard deviation. The per-observation noise (disclosed by the
//! oracle) stays fixed; only the latent component is estimated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Bounds;
use crate::error::{Error, Result};
use crate::gp::{log_marginal_likelihood, GpHyperparams, RegionObservation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub amplitude_sq_range: (f64, f64),
    /// Natural-scale range per dimension.
    pub lengthscale_ranges: Vec<(f64, f64)>,
    pub noise_sd_range: (f64, f64),
    pub restarts: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Query number from which fitting replaces the initial values.
    pub activation_step: usize,
    pub tie_lengthscales: bool,
    /// Restarts for refits after the first, which start from the previous
    /// estimate.
    #[serde(default = "one")]
    pub warm_restarts: usize,
    /// Hyperparameters used before activation; always one of the restarts.
    pub initial: GpHyperparams,
}

fn one() -> usize {
    1
}

impl FitConfig {
    /// Default search box: α in [1e-4, 1e4], lengthscales in [1%, 300%] of
    /// each dimension's extent, latent noise sd in [1e-6, 1e2].
    pub fn for_bounds(bounds: &Bounds, initial: GpHyperparams) -> Self {
        FitConfig {
            amplitude_sq_range: (1e-4, 1e4),
            lengthscale_ranges: bounds.sides.iter().map(|s| (0.01 * s.width(), 3.0 * s.width())).collect(),
            noise_sd_range: (1e-6, 1e2),
            restarts: 5,
            tolerance: 1e-6,
            max_iterations: 200,
            activation_step: 10,
            tie_lengthscales: false,
            warm_restarts: 1,
            initial,
        }
    }

    /// Configuration for a refit that starts from `previous`.
    pub fn warm(&self, previous: &GpHyperparams) -> FitConfig {
        FitConfig { restarts: self.warm_restarts, initial: previous.clone(), ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo > 0.0 && hi > lo && hi.is_finite();
        if !ok(self.amplitude_sq_range) || !ok(self.noise_sd_range) || !self.lengthscale_ranges.iter().all(|r| ok(*r)) {
            return Err(Error::InvalidConfig("fit bounds must be finite, positive and ordered".into()));
        }
        if self.restarts == 0 || self.warm_restarts == 0 || self.activation_step == 0 {
            return Err(Error::InvalidConfig("restarts and activation_step must be >= 1".into()));
        }
        if self.lengthscale_ranges.len() != self.initial.dim() {
            return Err(Error::DimensionMismatch { expected: self.initial.dim(), got: self.lengthscale_ranges.len() });
        }
        Ok(())
    }

    fn dim(&self) -> usize {
        self.lengthscale_ranges.len()
    }

    /// Log-space box for the packed parameter vector.
    fn log_box(&self) -> Vec<(f64, f64)> {
        let ln = |(lo, hi): (f64, f64)| (f64::ln(lo), f64::ln(hi));
        let mut b = vec![ln(self.amplitude_sq_range)];
        if self.tie_lengthscales {
            // shared lengthscale: intersect the per-dimension ranges loosely
            let lo = self.lengthscale_ranges.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
            let hi = self.lengthscale_ranges.iter().map(|r| r.1).fold(0.0, f64::max);
            b.push(ln((lo, hi)));
        } else {
            b.extend(self.lengthscale_ranges.iter().map(|r| ln(*r)));
        }
        b.push(ln(self.noise_sd_range));
        b
    }

    fn pack(&self, h: &GpHyperparams) -> Vec<f64> {
        let mut p = vec![h.amplitude_sq.ln()];
        if self.tie_lengthscales {
            let g = h.lengthscales.iter().map(|l| l.ln()).sum::<f64>() / h.dim() as f64;
            p.push(g);
        } else {
            p.extend(h.lengthscales.iter().map(|l| l.ln()));
        }
        p.push(h.noise_sd.max(self.noise_sd_range.0).ln());
        clamp_to(&mut p, &self.log_box());
        p
    }

    fn unpack(&self, p: &[f64]) -> GpHyperparams {
        let ls = if self.tie_lengthscales {
            vec![p[1].exp(); self.dim()]
        } else {
            p[1..=self.dim()].iter().map(|v| v.exp()).collect()
        };
        GpHyperparams { amplitude_sq: p[0].exp(), lengthscales: ls, noise_sd: p[p.len() - 1].exp() }
    }
}

fn clamp_to(p: &mut [f64], bx: &[(f64, f64)]) {
    for (v, (lo, hi)) in p.iter_mut().zip(bx) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Maximizes the log marginal likelihood over a multi-start set. The fixed
/// initial hyperparameters are always the first start, so the result is never
/// worse than them.
pub fn fit_hyperparams(observations: &[RegionObservation], config: &FitConfig, seed: u64) -> Result<GpHyperparams> {
    config.validate()?;
    if observations.is_empty() {
        return Err(Error::FitFailed("no observations".into()));
    }
    let bx = config.log_box();
    let objective = |p: &[f64]| -> f64 {
        let mut q = p.to_vec();
        clamp_to(&mut q, &bx);
        match log_marginal_likelihood(observations, &config.unpack(&q)) {
            Ok(v) => -v,
            Err(_) => f64::INFINITY,
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = vec![config.pack(&config.initial)];
    for _ in 1..config.restarts {
        starts.push(bx.iter().map(|(lo, hi)| rng.gen_range(*lo..=*hi)).collect());
    }

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut failures = Vec::new();
    for start in starts {
        let (mut p, f) = nelder_mead(&objective, &start, 0.5, config.tolerance, config.max_iterations);
        clamp_to(&mut p, &bx);
        if f.is_finite() {
            if best.as_ref().map_or(true, |(_, bf)| f < *bf) {
                best = Some((p, f));
            }
        } else {
            failures.push(start);
        }
    }
    match best {
        Some((p, _)) => Ok(config.unpack(&p)),
        None => Err(Error::FitFailed(format!(
            "all {} restarts produced a non-finite likelihood (starts: {failures:?})",
            config.restarts
        ))),
    }
}

/// Plain Nelder-Mead minimizer. Returns the best vertex and its value.
fn nelder_mead<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], step: f64, tol: f64, max_iter: usize) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step;
        let fx = f(&x);
        simplex.push((x, fx));
    }
    let order = |s: &mut Vec<(Vec<f64>, f64)>| s.sort_by(|a, b| a.1.total_cmp(&b.1));
    for _ in 0..max_iter {
        order(&mut simplex);
        let (fb, fw) = (simplex[0].1, simplex[n].1);
        if fb.is_finite() && (fw - fb).abs() <= tol * (1.0 + fb.abs()) {
            break;
        }
        let centroid: Vec<f64> =
            (0..n).map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> {
            centroid.iter().zip(&simplex[n].0).map(|(c, w)| c + t * (w - c)).collect()
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = f(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let x = along(-0.5);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(0.5);
                let v = f(&x);
                (x, v)
            };
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                // shrink toward the best vertex
                let best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = best.iter().zip(&v.0).map(|(b, x)| b + 0.5 * (x - b)).collect();
                    let fx = f(&x);
                    *v = (x, fx);
                }
            }
        }
    }
    order(&mut simplex);
    simplex.swap_remove(0)
}
