//! Acquisition functions over candidate regions and next-query selection.
//!
//! All scores are "larger is better". Posterior means passed to the scoring
//! functions are net of the treatment cost.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Bounds, Interval, Region};
use crate::error::{Error, Result};
use crate::gp::kernel::{normal_cdf, normal_pdf};
use crate::gp::GpState;
use crate::strategy::grid_cells;

/// Scores whose denominator vanishes are capped here.
pub const SCORE_CAP: f64 = 1e12;
const MEAN_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AfFamily {
    Taaf,
    VarianceMi,
    Regret,
    PureVariance,
    PureAbsMean,
    LogWeighted,
    AreaWeighted,
    Ratio,
    FullPosterior,
}

impl AfFamily {
    pub const ALL: [AfFamily; 9] = [
        AfFamily::Taaf,
        AfFamily::VarianceMi,
        AfFamily::Regret,
        AfFamily::PureVariance,
        AfFamily::PureAbsMean,
        AfFamily::LogWeighted,
        AfFamily::AreaWeighted,
        AfFamily::Ratio,
        AfFamily::FullPosterior,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AfFamily::Taaf => "taaf",
            AfFamily::VarianceMi => "variance_mi",
            AfFamily::Regret => "regret",
            AfFamily::PureVariance => "pure_variance",
            AfFamily::PureAbsMean => "pure_abs_mean",
            AfFamily::LogWeighted => "log_weighted",
            AfFamily::AreaWeighted => "area_weighted",
            AfFamily::Ratio => "ratio",
            AfFamily::FullPosterior => "full_posterior",
        }
    }

    pub fn parse(s: &str) -> Option<AfFamily> {
        AfFamily::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeMode {
    None,
    Penalty,
    Constraint,
    PenaltyAndConstraint,
}

impl SizeMode {
    pub const ALL: [SizeMode; 4] =
        [SizeMode::None, SizeMode::Penalty, SizeMode::Constraint, SizeMode::PenaltyAndConstraint];

    pub fn name(&self) -> &'static str {
        match self {
            SizeMode::None => "none",
            SizeMode::Penalty => "penalty",
            SizeMode::Constraint => "constraint",
            SizeMode::PenaltyAndConstraint => "penalty_and_constraint",
        }
    }

    pub fn parse(s: &str) -> Option<SizeMode> {
        SizeMode::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn constrained(&self) -> bool {
        matches!(self, SizeMode::Constraint | SizeMode::PenaltyAndConstraint)
    }

    pub fn penalized(&self) -> bool {
        matches!(self, SizeMode::Penalty | SizeMode::PenaltyAndConstraint)
    }
}

/// Exploration weight schedule for TAAF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaSchedule {
    Fixed,
    /// `β_i = start - slope · i` for query number `i` (1-based).
    LinearDecay { start: f64, slope: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AfConfig {
    pub family: AfFamily,
    pub beta: f64,
    pub beta_schedule: BetaSchedule,
    pub tau: f64,
    pub size_mode: SizeMode,
    /// Fixed penalty weight; `None` uses half the standard deviation of the
    /// step's unpenalized feasible scores.
    pub penalty_weight: Option<f64>,
    pub f_min: f64,
    pub f_max: f64,
    pub top_k: usize,
    pub candidate_count: usize,
    pub forbid_exact_repeats: bool,
    pub full_posterior_samples: usize,
    /// Bins per dimension of the partition used by the full-posterior score.
    pub full_posterior_bins: usize,
}

impl Default for AfConfig {
    fn default() -> Self {
        AfConfig {
            family: AfFamily::Taaf,
            beta: 1.96,
            beta_schedule: BetaSchedule::Fixed,
            tau: 1.0,
            size_mode: SizeMode::PenaltyAndConstraint,
            penalty_weight: None,
            f_min: 0.15,
            f_max: 0.60,
            top_k: 1,
            candidate_count: 1000,
            forbid_exact_repeats: true,
            full_posterior_samples: 200,
            full_posterior_bins: 4,
        }
    }
}

impl AfConfig {
    pub fn with_family(family: AfFamily, size_mode: SizeMode) -> Self {
        let mut cfg = AfConfig { family, size_mode, ..AfConfig::default() };
        if family == AfFamily::FullPosterior {
            cfg.candidate_count = 50;
        }
        cfg
    }

    /// Preset for the empirical pipeline: unconstrained TAAF, β = 3 - i/100,
    /// random choice among the five best candidates, no exact repeats.
    pub fn empirical() -> Self {
        AfConfig {
            family: AfFamily::Taaf,
            beta: 3.0,
            beta_schedule: BetaSchedule::LinearDecay { start: 3.0, slope: 0.01 },
            size_mode: SizeMode::None,
            top_k: 5,
            forbid_exact_repeats: true,
            ..AfConfig::default()
        }
    }

    /// Side-fraction constraint scaled to the side of a uniform grid cell
    /// at `budget` queries: `[lo, hi] × budget^(-1/dim)`, capped at 1.
    pub fn scaled_to_budget(&self, lo: f64, hi: f64, budget: usize, dim: usize) -> AfConfig {
        let cell = (budget.max(1) as f64).powf(-1.0 / dim.max(1) as f64);
        let f_max = (hi * cell).min(1.0);
        let f_min = (lo * cell).min(f_max / 2.0);
        AfConfig { f_min, f_max, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0 < self.f_min && self.f_min < self.f_max && self.f_max <= 1.0) {
            return bad(format!("need 0 < f_min < f_max <= 1, got ({}, {})", self.f_min, self.f_max));
        }
        if self.candidate_count == 0 || self.top_k == 0 || self.top_k > self.candidate_count {
            return bad(format!(
                "need 1 <= top_k <= candidate_count, got top_k {} and candidate_count {}",
                self.top_k, self.candidate_count
            ));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if let Some(l) = self.penalty_weight {
            if !(l >= 0.0) {
                return bad(format!("penalty weight must be >= 0, got {l}"));
            }
        }
        if self.full_posterior_samples == 0 || self.full_posterior_bins == 0 {
            return bad("full-posterior samples and bins must be >= 1".into());
        }
        Ok(())
    }

    /// β used at query number `step` (1-based).
    pub fn beta_at(&self, step: usize) -> f64 {
        match self.beta_schedule {
            BetaSchedule::Fixed => self.beta,
            BetaSchedule::LinearDecay { start, slope } => start - slope * step as f64,
        }
    }
}

/// Targeting-aware acquisition: `β V - |m|`.
pub fn taaf(mean: f64, var: f64, beta: f64) -> f64 {
    beta * var - mean.abs()
}

/// Variance-based score `σ² - σ²/(σ²+τ) ln(1 + τ/σ²)`. Increasing for
/// `σ² >= 0.12 τ`; below that it dips negative before tending to 0.
pub fn af_variance_mi(var: f64, tau: f64) -> f64 {
    if var <= 0.0 {
        return 0.0;
    }
    var - var / (var + tau) * (tau / var).ln_1p()
}

/// Sign-misspecification regret proxy `σ |μ|`.
pub fn af_regret(mean: f64, sd: f64) -> f64 {
    sd * mean.abs()
}

/// The single-expression candidates (pure variance, pure absolute mean,
/// log-weighted, area-weighted, ratio).
pub fn af_appendix(family: AfFamily, mean: f64, sd: f64, region: &Region) -> Result<f64> {
    let guarded = |num: f64| if mean.abs() < MEAN_GUARD { SCORE_CAP } else { num };
    let score = match family {
        AfFamily::PureVariance => sd,
        AfFamily::PureAbsMean => -mean.abs(),
        AfFamily::LogWeighted => guarded((sd * sd).ln() - mean.abs().ln()),
        AfFamily::AreaWeighted => (sd - mean) / region.volume(),
        AfFamily::Ratio => guarded(sd / mean.abs()),
        other => {
            return Err(Error::InvalidConfig(format!("{} is not a closed-form appendix score", other.name())))
        }
    };
    Ok(score.min(SCORE_CAP))
}

/// Expected gain from learning the exact effect of a unit whose effect is
/// `N(mean, sd²)`, relative to acting on the prior mean.
pub fn value_of_querying(mean: f64, sd: f64) -> f64 {
    if !(sd > 0.0) {
        return 0.0;
    }
    // equal to μ[1-Φ(-μ/σ)] + σφ(-μ/σ) - max(μ,0), written without cancellation
    let z = mean / sd;
    sd * (normal_pdf(z) - z.abs() * normal_cdf(-z.abs()))
}

/// Closed-form score for a candidate with posterior `(mean, var)`.
fn closed_form_score(family: AfFamily, mean: f64, var: f64, region: &Region, beta: f64, tau: f64) -> Result<f64> {
    let sd = var.max(0.0).sqrt();
    match family {
        AfFamily::Taaf => Ok(taaf(mean, var, beta)),
        AfFamily::VarianceMi => Ok(af_variance_mi(var, tau)),
        AfFamily::Regret => Ok(af_regret(mean, sd)),
        AfFamily::FullPosterior => Err(Error::InvalidConfig("full_posterior needs a partition".into())),
        f => af_appendix(f, mean, sd, region),
    }
}

/// Posterior quantities of a fixed partition, reused across candidates.
struct PartitionCache {
    cells: Vec<Region>,
    weights: Vec<f64>,
    means: Vec<f64>,
}

impl PartitionCache {
    fn new(state: &GpState, partition: &[Region]) -> Result<Self> {
        let total: f64 = partition.iter().map(Region::volume).sum();
        let means = partition
            .iter()
            .map(|c| state.posterior_region(c).map(|(m, _)| m))
            .collect::<Result<Vec<_>>>()?;
        Ok(PartitionCache {
            cells: partition.to_vec(),
            weights: partition.iter().map(|c| c.volume() / total).collect(),
            means,
        })
    }

    fn value(&self, means: impl Iterator<Item = f64>, cost: f64) -> f64 {
        self.weights.iter().zip(means).map(|(w, m)| w * (m - cost).max(0.0)).sum()
    }
}

/// Monte-Carlo value of information: sample the candidate's observation from
/// its posterior predictive, update the partition's posterior means, and
/// average the change in the value of the sign-based policy.
pub fn af_full_posterior<R: Rng>(
    state: &GpState,
    candidate: &Region,
    sample_count: usize,
    partition: &[Region],
    cost: f64,
    rng: &mut R,
) -> Result<f64> {
    let cache = PartitionCache::new(state, partition)?;
    full_posterior_cached(state, candidate, sample_count, &cache, cost, rng)
}

fn full_posterior_cached<R: Rng>(
    state: &GpState,
    candidate: &Region,
    sample_count: usize,
    cache: &PartitionCache,
    cost: f64,
    rng: &mut R,
) -> Result<f64> {
    if sample_count == 0 {
        return Err(Error::InvalidConfig("sample_count must be >= 1".into()));
    }
    let (mc, vc) = state.posterior_region(candidate)?;
    if vc <= 0.0 {
        return Ok(0.0);
    }
    let latent = state.hyperparams().noise_sd.powi(2);
    let predictive = vc + latent;
    let gains = cache
        .cells
        .iter()
        .map(|c| state.posterior_cov(c, candidate).map(|cov| cov / predictive))
        .collect::<Result<Vec<_>>>()?;
    let current = cache.value(cache.means.iter().copied(), cost);
    let normal = Normal::new(mc, predictive.sqrt()).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut acc = 0.0;
    for _ in 0..sample_count {
        let y = normal.sample(rng);
        let updated = cache.means.iter().zip(&gains).map(|(m, g)| m + g * (y - mc));
        acc += cache.value(updated, cost);
    }
    Ok(acc / sample_count as f64 - current)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub region: Region,
    pub mean: f64,
    pub var: f64,
    pub score: f64,
    pub feasible: bool,
}

/// True when every side fraction lies in `[f_min, f_max]`.
pub fn passes_size_constraint(region: &Region, bounds: &Bounds, f_min: f64, f_max: f64) -> bool {
    // tolerate rounding from generating sides as fractions of the bounds
    const TOL: f64 = 1e-9;
    region.side_fractions(bounds).iter().all(|&f| f >= f_min - TOL && f <= f_max + TOL)
}

/// Applies the configured size treatment; returns `(score, feasible)`.
pub fn apply_size_treatment(score: f64, region: &Region, bounds: &Bounds, config: &AfConfig, penalty_weight: f64) -> (f64, bool) {
    let feasible = !config.size_mode.constrained() || passes_size_constraint(region, bounds, config.f_min, config.f_max);
    let score = if config.size_mode.penalized() {
        score - penalty_weight * region.volume() / bounds.volume()
    } else {
        score
    };
    (score, feasible)
}

/// Random candidate boxes. Constrained modes draw every side fraction from
/// `[f_min, f_max]` and place the box fully inside the bounds; otherwise side
/// fractions come from `(0, 1]` around a uniform center and are clipped.
pub fn generate_candidates<R: Rng>(bounds: &Bounds, config: &AfConfig, rng: &mut R) -> Vec<Region> {
    let constrained = config.size_mode.constrained();
    (0..config.candidate_count)
        .map(|_| {
            let sides = bounds
                .sides
                .iter()
                .map(|b| {
                    let width = b.width();
                    if constrained {
                        let side = rng.gen_range(config.f_min..=config.f_max) * width;
                        let lo = b.lo + rng.gen::<f64>() * (width - side);
                        Interval::new(lo, (lo + side).min(b.hi))
                    } else {
                        let side = (1.0 - rng.gen::<f64>()) * width;
                        let center = b.lo + rng.gen::<f64>() * width;
                        Interval::new((center - side / 2.0).max(b.lo), (center + side / 2.0).min(b.hi))
                    }
                })
                .collect();
            Region { sides }
        })
        .collect()
}

/// Scores `candidates` against `state`, applying the size treatment.
/// `step` is the 1-based query number (drives the β schedule).
pub fn score_candidates<R: Rng>(
    state: &GpState,
    candidates: Vec<Region>,
    bounds: &Bounds,
    config: &AfConfig,
    cost: f64,
    step: usize,
    rng: &mut R,
) -> Result<Vec<ScoredCandidate>> {
    let beta = config.beta_at(step);
    let raw: Vec<(Region, f64, f64, f64)> = if config.family == AfFamily::FullPosterior {
        let partition = grid_cells(bounds, &vec![config.full_posterior_bins; bounds.dim()]);
        let cache = PartitionCache::new(state, &partition)?;
        let seeds: Vec<u64> = candidates.iter().map(|_| rng.gen()).collect();
        candidates
            .into_par_iter()
            .zip(seeds)
            .map(|(region, seed)| {
                let (m, v) = state.posterior_region(&region)?;
                let mut crng = ChaCha8Rng::seed_from_u64(seed);
                let s = full_posterior_cached(state, &region, config.full_posterior_samples, &cache, cost, &mut crng)?;
                Ok((region, m - cost, v, s))
            })
            .collect::<Result<_>>()?
    } else {
        candidates
            .into_par_iter()
            .map(|region| {
                let (m, v) = state.posterior_region(&region)?;
                let net = m - cost;
                let s = closed_form_score(config.family, net, v, &region, beta, config.tau)?;
                Ok((region, net, v, s))
            })
            .collect::<Result<_>>()?
    };

    let penalty_weight = match config.penalty_weight {
        Some(l) => l,
        None if config.size_mode.penalized() => {
            let feasible: Vec<f64> = raw
                .iter()
                .filter(|(r, ..)| {
                    !config.size_mode.constrained() || passes_size_constraint(r, bounds, config.f_min, config.f_max)
                })
                .map(|c| c.3)
                .filter(|s| s.is_finite())
                .collect();
            0.5 * std_dev(&feasible)
        }
        None => 0.0,
    };

    Ok(raw
        .into_iter()
        .map(|(region, mean, var, s)| {
            let (score, feasible) = apply_size_treatment(s, &region, bounds, config, penalty_weight);
            ScoredCandidate { region, mean, var, score, feasible: feasible && score.is_finite() }
        })
        .collect())
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Picks the next region: generate candidates, score them, drop infeasible
/// ones and exact repeats of `history`, then choose uniformly among the
/// `top_k` best.
pub fn select_next<R: Rng>(
    state: &GpState,
    history: &[Region],
    bounds: &Bounds,
    config: &AfConfig,
    cost: f64,
    step: usize,
    rng: &mut R,
) -> Result<Region> {
    select_next_avoiding(state, history, &[], bounds, config, cost, step, rng)
}

/// As [`select_next`], additionally dropping candidates that lie inside any
/// region of `avoid`.
#[allow(clippy::too_many_arguments)]
pub fn select_next_avoiding<R: Rng>(
    state: &GpState,
    history: &[Region],
    avoid: &[Region],
    bounds: &Bounds,
    config: &AfConfig,
    cost: f64,
    step: usize,
    rng: &mut R,
) -> Result<Region> {
    let candidates = generate_candidates(bounds, config, rng);
    let scored = score_candidates(state, candidates, bounds, config, cost, step, rng)?;
    let mut pool: Vec<ScoredCandidate> = scored
        .into_iter()
        .filter(|c| c.feasible)
        .filter(|c| !config.forbid_exact_repeats || !history.contains(&c.region))
        .filter(|c| !avoid.iter().any(|a| a.contains_region(&c.region)))
        .collect();
    if pool.is_empty() {
        return Err(Error::NoFeasibleCandidate);
    }
    // stable sort keeps generation order among ties
    pool.sort_by(|a, b| b.score.total_cmp(&a.score));
    let k = config.top_k.min(pool.len());
    let pick = if k == 1 { 0 } else { rng.gen_range(0..k) };
    Ok(pool.swap_remove(pick).region)
}
