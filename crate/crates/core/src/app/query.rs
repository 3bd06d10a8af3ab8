//! Bootstrapped querying on an ingested experimental dataset.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ingest::{CsvSchema, NamedDataset};
use crate::acquisition::{AfConfig, SizeMode};
use crate::domain::{Bounds, Dataset, Interval, Region};
use crate::error::{Error, Result};
use crate::gp::GpHyperparams;
use crate::hyperfit::FitConfig;
use crate::oracle::{PrivacyConfig, QueryRecord, QuerySession};
use crate::policy_eval::EvaluationReport;
use crate::strategy::{balanced_bins, run_strategic, run_uniform, LatentNoise, StrategicRunConfig, TargetingPolicy};
use crate::synth::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMethod {
    Uniform,
    Strategic,
}

impl QueryMethod {
    pub fn name(&self) -> &'static str {
        match self {
            QueryMethod::Uniform => "uniform",
            QueryMethod::Strategic => "strategic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub enabled: bool,
    pub activation_step: usize,
    pub restarts: usize,
    pub warm_restarts: usize,
    pub max_iterations: usize,
    pub tie_lengthscales: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            enabled: true,
            activation_step: 10,
            restarts: 5,
            warm_restarts: 1,
            max_iterations: 200,
            tie_lengthscales: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryConfig {
    pub dataset: PathBuf,
    pub schema: CsvSchema,
    pub keep: Vec<String>,
    pub sum_rest: bool,
    pub train_size: usize,
    pub eval_size: usize,
    pub bootstraps: usize,
    pub query_budgets: Vec<usize>,
    pub noise_scales: Vec<f64>,
    pub min_count: usize,
    pub cost: f64,
    pub methods: Vec<QueryMethod>,
    /// Give strategic querying only as many queries as uniform querying
    /// actually got answered.
    pub match_budget: bool,
    pub policy_resolution: usize,
    pub af: AfConfig,
    /// Scale the side-fraction constraint to the strategic budget, as
    /// `[lo, hi]` multiples of a uniform cell's side; `None` keeps `af`.
    pub budget_scaled_sizes: Option<(f64, f64)>,
    pub fit: FitOptions,
    /// Hyperparameters before fitting, on standardized covariates; the
    /// latent noise sd is the noise scale plus `initial_noise_offset`.
    pub initial_amplitude_sq: f64,
    pub initial_lengthscale: f64,
    pub initial_noise_offset: f64,
    pub latent_noise: LatentNoise,
    pub paper_literal_ipw: bool,
}

impl Default for QueryConfig {
    fn default() -> Self {
        QueryConfig {
            dataset: PathBuf::from("data.csv"),
            schema: CsvSchema::uplift_default(),
            keep: vec!["f0".into(), "f6".into()],
            sum_rest: true,
            train_size: 50_000,
            eval_size: 50_000,
            bootstraps: 20,
            query_budgets: vec![27, 64],
            noise_scales: vec![0.01, 0.1],
            min_count: 20,
            cost: 0.01,
            methods: vec![QueryMethod::Uniform, QueryMethod::Strategic],
            match_budget: true,
            policy_resolution: 10,
            af: AfConfig { size_mode: SizeMode::PenaltyAndConstraint, ..AfConfig::empirical() },
            budget_scaled_sizes: Some((1.0, 2.0)),
            fit: FitOptions::default(),
            initial_amplitude_sq: 1.0,
            initial_lengthscale: 1.0,
            initial_noise_offset: 0.01,
            latent_noise: LatentNoise::PerRow,
            paper_literal_ipw: false,
        }
    }
}

impl QueryConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.train_size == 0 || self.eval_size == 0 || self.bootstraps == 0 {
            return bad("train_size, eval_size and bootstraps must be >= 1");
        }
        if self.query_budgets.is_empty() || self.noise_scales.is_empty() || self.methods.is_empty() {
            return bad("need at least one budget, noise scale and method");
        }
        for &q in &self.query_budgets {
            PrivacyConfig::new(q, 0.0, self.min_count, 0).validate()?;
        }
        if self.noise_scales.iter().any(|s| !(*s >= 0.0)) {
            return bad("noise scales must be >= 0");
        }
        if self.policy_resolution == 0 {
            return bad("policy_resolution must be >= 1");
        }
        if !(self.initial_amplitude_sq > 0.0 && self.initial_lengthscale > 0.0 && self.initial_noise_offset >= 0.0) {
            return bad("initial hyperparameters must be positive");
        }
        if let Some((lo, hi)) = self.budget_scaled_sizes {
            if !(0.0 < lo && lo < hi) {
                return bad("budget_scaled_sizes needs 0 < lo < hi");
            }
        }
        self.af.validate()
    }
}

/// Per-column standardization fitted on the full dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = data.len() as f64;
        let dim = data.dim();
        let mut mean = vec![0.0; dim];
        for x in data.covariates() {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut sd = vec![0.0; dim];
        for x in data.covariates() {
            for ((s, v), m) in sd.iter_mut().zip(x).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let sd = sd.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Ok(Standardizer { mean, sd })
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        let cov = data
            .covariates()
            .iter()
            .map(|x| x.iter().zip(&self.mean).zip(&self.sd).map(|((v, m), s)| (v - m) / s).collect())
            .collect();
        data.with_covariates(cov)
    }

    /// Maps a region on the standardized scale back to original units.
    pub fn invert_region(&self, region: &Region) -> Result<Region> {
        let sides = region
            .sides
            .iter()
            .zip(&self.mean)
            .zip(&self.sd)
            .map(|((iv, m), s)| Interval::new(iv.lo * s + m, iv.hi * s + m))
            .collect();
        Region::new(sides)
    }
}

#[derive(Debug, Clone)]
pub struct QueryRun {
    pub query_budget: usize,
    pub noise_scale: f64,
    pub bootstrap: usize,
    pub method: QueryMethod,
    /// Policy on the original covariate scale.
    pub policy: TargetingPolicy,
    /// Audit log with regions on the original covariate scale.
    pub records: Vec<QueryRecord>,
    /// Budget the session was opened with.
    pub budget: usize,
    /// Hyperparameters the strategic client ended with, on the
    /// standardized scale.
    pub hyperparams: Option<GpHyperparams>,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub runs: Vec<QueryRun>,
    /// Bounds of the original covariates.
    pub bounds: Bounds,
    /// `(train, eval)` row indices per bootstrap, shared by all settings.
    pub samples: Vec<(Vec<usize>, Vec<usize>)>,
}

/// Runs every (budget, noise scale) pair on every bootstrap. The train and
/// eval draws depend only on the seed and bootstrap index.
pub fn run_query(config: &QueryConfig, data: &NamedDataset, seed: u64, parallelism: usize) -> Result<QueryOutcome> {
    config.validate()?;
    let raw = &data.data;
    let standardizer = Standardizer::fit(raw)?;
    let standard = standardizer.apply(raw)?;
    let raw_bounds = Bounds::enclosing(raw.covariates())?;
    let std_bounds = Bounds::enclosing(standard.covariates())?;
    let n = raw.len();
    let samples: Vec<(Vec<usize>, Vec<usize>)> = (0..config.bootstraps)
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, b as u64, 0xB007]));
            let train = (0..config.train_size).map(|_| rng.gen_range(0..n)).collect();
            let eval = (0..config.eval_size).map(|_| rng.gen_range(0..n)).collect();
            (train, eval)
        })
        .collect();
    let mut jobs = Vec::new();
    for (k, &q) in config.query_budgets.iter().enumerate() {
        for (j, &s) in config.noise_scales.iter().enumerate() {
            for b in 0..config.bootstraps {
                jobs.push((k, j, q, s, b));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let per_job: Vec<Vec<QueryRun>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(k, j, q, s, b)| {
                let (train_idx, eval_idx) = &samples[b];
                let train = standard.select(train_idx);
                let eval = raw.select(eval_idx);
                let key = [seed, k as u64, j as u64, b as u64];
                run_bootstrap(config, &train, &eval, &standardizer, &std_bounds, &raw_bounds, q, s, b, key)
            })
            .collect::<Result<_>>()
    })?;
    Ok(QueryOutcome { runs: per_job.into_iter().flatten().collect(), bounds: raw_bounds, samples })
}

#[allow(clippy::too_many_arguments)]
fn run_bootstrap(
    config: &QueryConfig,
    train: &Dataset,
    eval: &Dataset,
    standardizer: &Standardizer,
    std_bounds: &Bounds,
    raw_bounds: &Bounds,
    q: usize,
    s: f64,
    b: usize,
    key: [u64; 4],
) -> Result<Vec<QueryRun>> {
    let seed_for = |stream: u64| derive_seed(&[key[0], key[1], key[2], key[3], stream]);
    let mut runs = Vec::new();
    let mut answered = q;
    for &method in &config.methods {
        let (policy, records, budget, hyperparams) = match method {
            QueryMethod::Uniform => {
                let privacy = PrivacyConfig::new(q, s, config.min_count, seed_for(1));
                let mut session = QuerySession::open(train, privacy)?;
                let bins = balanced_bins(q, train.dim());
                let (policy, records) = run_uniform(&mut session, std_bounds, &bins, config.cost)?;
                answered = records.iter().filter(|r| !r.suppressed).count();
                (policy, records, q, None)
            }
            QueryMethod::Strategic => {
                let budget = if config.match_budget && config.methods.contains(&QueryMethod::Uniform) {
                    answered.max(1)
                } else {
                    q
                };
                let privacy = PrivacyConfig::new(budget, s, config.min_count, seed_for(2));
                let mut session = QuerySession::open(train, privacy)?;
                let dim = train.dim();
                let initial = GpHyperparams::new(
                    config.initial_amplitude_sq,
                    vec![config.initial_lengthscale; dim],
                    s + config.initial_noise_offset,
                )?;
                let fit = config.fit.enabled.then(|| FitConfig {
                    activation_step: config.fit.activation_step,
                    restarts: config.fit.restarts,
                    warm_restarts: config.fit.warm_restarts,
                    max_iterations: config.fit.max_iterations,
                    tie_lengthscales: config.fit.tie_lengthscales,
                    ..FitConfig::for_bounds(std_bounds, initial.clone())
                });
                let run_config = StrategicRunConfig {
                    af: match config.budget_scaled_sizes {
                        Some((lo, hi)) => config.af.scaled_to_budget(lo, hi, budget, std_bounds.dim()),
                        None => config.af.clone(),
                    },
                    fit,
                    cost: config.cost,
                    resolution: config.policy_resolution,
                    initial,
                    latent_noise: config.latent_noise,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed_for(3));
                let out = run_strategic(&mut session, std_bounds, &run_config, &mut rng)?;
                (out.policy, out.records, budget, Some(out.state.hyperparams().clone()))
            }
        };
        // standardization is affine per dimension, so the grid carries over
        let policy = policy.with_bounds(raw_bounds.clone())?;
        let report = EvaluationReport::on_dataset(&policy, eval, config.cost, config.paper_literal_ipw)?;
        let records = records
            .into_iter()
            .map(|r| Ok(QueryRecord { region: standardizer.invert_region(&r.region)?, ..r }))
            .collect::<Result<Vec<_>>>()?;
        runs.push(QueryRun { query_budget: q, noise_scale: s, bootstrap: b, method, policy, records, budget, hyperparams, report });
    }
    Ok(runs)
}
