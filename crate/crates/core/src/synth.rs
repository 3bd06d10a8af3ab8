//! Synthetic treatment-effect surfaces, populations, and the factorial
//! experiment harness.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{AfConfig, AfFamily, SizeMode};
use crate::domain::{Bounds, Dataset, Population};
use crate::error::{Error, Result};
use crate::gp::GpHyperparams;
use crate::hyperfit::FitConfig;
use crate::oracle::{PrivacyConfig, QuerySession};
use crate::policy_eval::{oracle_policy_value, policy_value_on_population};
use crate::strategy::{balanced_bins, run_strategic, run_uniform, LatentNoise, StrategicRunConfig};

pub const RESULTS_SCHEMA: &str = "# schema_version=1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    /// Square root of the kernel amplitude.
    pub amplitude: f64,
    pub lengthscale: f64,
    pub dim: usize,
    pub lo: f64,
    pub hi: f64,
    /// Grid nodes per dimension.
    pub resolution: usize,
    pub population_size: usize,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig { amplitude: 5.0, lengthscale: 30.0, dim: 3, lo: 0.0, hi: 100.0, resolution: 20, population_size: 5000 }
    }
}

impl DgpConfig {
    pub fn amplitude_sq(&self) -> f64 {
        self.amplitude * self.amplitude
    }

    pub fn bounds(&self) -> Result<Bounds> {
        Bounds::cube(self.dim, self.lo, self.hi)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.resolution < 2 {
            return bad(format!("surface resolution must be >= 2, got {}", self.resolution));
        }
        if self.population_size == 0 {
            return bad("population size must be >= 1".into());
        }
        if self.dim == 0 || !(self.lo < self.hi) {
            return bad("need dim >= 1 and lo < hi".into());
        }
        if !(self.amplitude > 0.0 && self.lengthscale > 0.0) {
            return bad("amplitude and lengthscale must be > 0".into());
        }
        if self.resolution.checked_pow(self.dim as u32).map_or(true, |n| n > 1_000_000) {
            return bad("surface grid too large".into());
        }
        Ok(())
    }

    /// Kernel hyperparameters of the generating process.
    pub fn hyperparams(&self, noise_sd: f64) -> Result<GpHyperparams> {
        GpHyperparams::isotropic(self.amplitude_sq(), self.lengthscale, self.dim, noise_sd)
    }
}

/// Effect values on a regular grid of nodes, multilinearly interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectSurface {
    pub lo: f64,
    pub hi: f64,
    pub dim: usize,
    pub resolution: usize,
    /// Node values, first dimension varying slowest.
    pub values: Vec<f64>,
}

impl EffectSurface {
    pub fn node(&self, i: usize) -> f64 {
        self.lo + (self.hi - self.lo) * i as f64 / (self.resolution - 1) as f64
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let r = self.resolution;
        let step = (self.hi - self.lo) / (r - 1) as f64;
        let mut base = Vec::with_capacity(self.dim);
        let mut frac = Vec::with_capacity(self.dim);
        for &v in x {
            let t = ((v - self.lo) / step).clamp(0.0, (r - 1) as f64);
            let i = (t.floor() as usize).min(r - 2);
            base.push(i);
            frac.push(t - i as f64);
        }
        let mut total = 0.0;
        for corner in 0..(1usize << self.dim) {
            let mut w = 1.0;
            let mut idx = 0;
            for d in 0..self.dim {
                let up = (corner >> (self.dim - 1 - d)) & 1;
                w *= if up == 1 { frac[d] } else { 1.0 - frac[d] };
                idx = idx * r + base[d] + up;
            }
            if w != 0.0 {
                total += w * self.values[idx];
            }
        }
        total
    }
}

/// Draws an exact zero-mean GP sample on the node grid. The separable kernel
/// on a tensor grid has Gram matrix `α K ⊗ ... ⊗ K`, so its Cholesky factor
/// is the Kronecker product of the 1-D factors.
pub fn sample_gp_surface<R: Rng>(config: &DgpConfig, rng: &mut R) -> Result<EffectSurface> {
    config.validate()?;
    let r = config.resolution;
    let mut surface = EffectSurface { lo: config.lo, hi: config.hi, dim: config.dim, resolution: r, values: Vec::new() };
    let nodes: Vec<f64> = (0..r).map(|i| surface.node(i)).collect();
    let l = config.lengthscale;
    let k = DMatrix::from_fn(r, r, |i, j| (-((nodes[i] - nodes[j]) / l).powi(2)).exp());
    let factor = [1e-10, 1e-7]
        .iter()
        .find_map(|&jitter| {
            let mut kj = k.clone();
            for i in 0..r {
                kj[(i, i)] += jitter;
            }
            kj.cholesky()
        })
        .ok_or(Error::NotPositiveDefinite)?
        .l();
    let total = r.pow(config.dim as u32);
    let mut values: Vec<f64> = (0..total).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut scratch = vec![0.0; r];
    for d in 0..config.dim {
        let stride = r.pow((config.dim - 1 - d) as u32);
        for start in 0..total {
            if (start / stride) % r != 0 {
                continue;
            }
            for (i, s) in scratch.iter_mut().enumerate() {
                *s = (0..=i).map(|j| factor[(i, j)] * values[start + j * stride]).sum();
            }
            for (i, s) in scratch.iter().enumerate() {
                values[start + i * stride] = *s;
            }
        }
    }
    let amp = config.amplitude;
    values.iter_mut().for_each(|v| *v *= amp);
    surface.values = values;
    Ok(surface)
}

/// Uniform covariates over the surface bounds, balanced random assignment,
/// and outcomes `Y = W τ(x)` so arm-mean differences carry no outcome noise.
pub fn sample_population<R: Rng>(surface: &EffectSurface, n: usize, rng: &mut R) -> Result<(Population, Dataset)> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let covariates: Vec<Vec<f64>> =
        (0..n).map(|_| (0..surface.dim).map(|_| rng.gen_range(surface.lo..=surface.hi)).collect()).collect();
    let true_effect: Vec<f64> = covariates.iter().map(|x| surface.eval(x)).collect();
    let treatment: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    let outcome = true_effect.iter().zip(&treatment).map(|(t, &w)| if w { *t } else { 0.0 }).collect();
    let dataset = Dataset::new(covariates.clone(), treatment, outcome, 0.5)?;
    Ok((Population { covariates, true_effect }, dataset))
}

/// A querying method: the uniform grid or a strategic variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MethodSpec {
    Uniform,
    Strategic(AfFamily, SizeMode),
}

impl MethodSpec {
    /// Uniform plus every family in `families` under every size treatment.
    pub fn grid(families: &[AfFamily]) -> Vec<MethodSpec> {
        let mut out = vec![MethodSpec::Uniform];
        for &f in families {
            out.extend(SizeMode::ALL.iter().map(|&m| MethodSpec::Strategic(f, m)));
        }
        out
    }

    /// The twelve simulation variants plus uniform.
    pub fn simulation_all() -> Vec<MethodSpec> {
        MethodSpec::grid(&[AfFamily::Taaf, AfFamily::VarianceMi, AfFamily::Regret])
    }

    /// Uniform and the four variants used in the dominance check.
    pub fn desk() -> Vec<MethodSpec> {
        vec![
            MethodSpec::Uniform,
            MethodSpec::Strategic(AfFamily::Taaf, SizeMode::None),
            MethodSpec::Strategic(AfFamily::Taaf, SizeMode::Constraint),
            MethodSpec::Strategic(AfFamily::Taaf, SizeMode::PenaltyAndConstraint),
            MethodSpec::Strategic(AfFamily::Regret, SizeMode::None),
        ]
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodSpec::Uniform => f.write_str("uniform"),
            MethodSpec::Strategic(af, size) => write!(f, "{}/{}", af.name(), size.name()),
        }
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "uniform" {
            return Ok(MethodSpec::Uniform);
        }
        let bad = || Error::InvalidConfig(format!("unknown method `{s}`"));
        let (af, size) = s.split_once('/').ok_or_else(bad)?;
        Ok(MethodSpec::Strategic(AfFamily::parse(af).ok_or_else(bad)?, SizeMode::parse(size).ok_or_else(bad)?))
    }
}

impl TryFrom<String> for MethodSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MethodSpec> for String {
    fn from(m: MethodSpec) -> String {
        m.to_string()
    }
}

/// Strategic-client settings shared by every simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimStrategy {
    /// Template for acquisition settings; family and size mode come from
    /// the method.
    pub af: AfConfig,
    /// Latent noise added to the generating kernel when the client models
    /// the surface.
    pub latent_noise_sd: f64,
    pub policy_resolution: usize,
    /// Refit hyperparameters by marginal likelihood from this query number
    /// on; `None` keeps the generating values throughout.
    pub fit_from_step: Option<usize>,
    /// Lengthscale the client starts from, as a fraction of the true one.
    pub lengthscale_factor: f64,
    /// When set, the size constraint becomes `(lo, hi)` times the side
    /// fraction of a uniform cell at the same budget, `Q^(-1/V)`, replacing
    /// the fixed `f_min` and `f_max` of `af`.
    pub budget_scaled_sizes: Option<(f64, f64)>,
}

impl SimStrategy {
    /// Acquisition settings for a run with `budget` queries in `dim`
    /// dimensions.
    pub fn af_for_budget(&self, budget: usize, dim: usize) -> AfConfig {
        match self.budget_scaled_sizes {
            Some((lo, hi)) => self.af.scaled_to_budget(lo, hi, budget, dim),
            None => self.af.clone(),
        }
    }
}

impl Default for SimStrategy {
    fn default() -> Self {
        SimStrategy {
            af: AfConfig::default(),
            latent_noise_sd: 0.0,
            policy_resolution: 10,
            fit_from_step: None,
            lengthscale_factor: 1.0,
            budget_scaled_sizes: Some((1.0, 2.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSetting {
    pub dgp: DgpConfig,
    pub query_budget: usize,
    pub noise_scale: f64,
    #[serde(default)]
    pub min_count: usize,
    #[serde(default)]
    pub cost: f64,
    pub methods: Vec<MethodSpec>,
    pub repeats: usize,
    #[serde(default)]
    pub strategy: SimStrategy,
}

impl ExperimentSetting {
    pub fn id(&self) -> String {
        format!(
            "amp{}_len{}_q{}_s{}",
            self.dgp.amplitude, self.dgp.lengthscale, self.query_budget, self.noise_scale
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        PrivacyConfig::new(self.query_budget, self.noise_scale, self.min_count, 0).validate()?;
        self.strategy.af.validate()?;
        self.strategy.af_for_budget(self.query_budget, self.dgp.dim).validate()?;
        if !(self.strategy.lengthscale_factor > 0.0 && self.strategy.lengthscale_factor.is_finite()) {
            return Err(Error::InvalidConfig("lengthscale_factor must be > 0".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("method list is empty".into()));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("repeats must be >= 1".into()));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::InvalidConfig("noise scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// The factorial grid: every combination of the listed parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub amplitudes: Vec<f64>,
    pub lengthscales: Vec<f64>,
    pub query_budgets: Vec<usize>,
    pub noise_scales: Vec<f64>,
    pub methods: Vec<MethodSpec>,
    pub repeats: usize,
    pub cost: f64,
    pub min_count: usize,
    pub resolution: usize,
    pub population_size: usize,
    pub strategy: SimStrategy,
}

impl Default for GridSpec {
    /// Desk-scale grid.
    fn default() -> Self {
        GridSpec {
            amplitudes: vec![5.0],
            lengthscales: vec![10.0, 30.0],
            query_budgets: vec![8, 27, 64],
            noise_scales: vec![1.0, 10.0],
            methods: MethodSpec::desk(),
            repeats: 30,
            cost: 0.0,
            min_count: 0,
            resolution: 20,
            population_size: 5000,
            strategy: SimStrategy::default(),
        }
    }
}

impl GridSpec {
    /// All 144 parameter combinations with every method and 100 repeats.
    pub fn full() -> Self {
        GridSpec {
            amplitudes: vec![2.0, 5.0, 10.0],
            lengthscales: vec![10.0, 30.0, 50.0],
            query_budgets: vec![8, 27, 64, 125],
            noise_scales: vec![0.1, 1.0, 10.0, 100.0],
            methods: MethodSpec::simulation_all(),
            repeats: 100,
            ..GridSpec::default()
        }
    }

    pub fn settings(&self) -> Vec<ExperimentSetting> {
        let mut out = Vec::new();
        for &amplitude in &self.amplitudes {
            for &lengthscale in &self.lengthscales {
                for &query_budget in &self.query_budgets {
                    for &noise_scale in &self.noise_scales {
                        out.push(ExperimentSetting {
                            dgp: DgpConfig {
                                amplitude,
                                lengthscale,
                                resolution: self.resolution,
                                population_size: self.population_size,
                                ..DgpConfig::default()
                            },
                            query_budget,
                            noise_scale,
                            min_count: self.min_count,
                            cost: self.cost,
                            methods: self.methods.clone(),
                            repeats: self.repeats,
                            strategy: self.strategy.clone(),
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub setting_id: String,
    pub amplitude: f64,
    pub lengthscale: f64,
    pub query_budget: usize,
    pub noise_scale: f64,
    pub method: String,
    pub repeat: usize,
    pub policy_value: f64,
    pub oracle_value: f64,
    pub uniform_value: f64,
    /// Policy value over oracle value.
    pub fraction_of_oracle: f64,
    /// Set when the run failed; the value columns are then NaN.
    #[serde(default)]
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn successful(&self) -> impl Iterator<Item = &ResultRow> {
        self.rows.iter().filter(|r| r.error.is_empty())
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{RESULTS_SCHEMA}")?;
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(mut input: R) -> Result<Self> {
        let mut first = String::new();
        input.read_line(&mut first)?;
        if first.trim_end() != RESULTS_SCHEMA {
            return Err(Error::Ingest(format!("expected `{RESULTS_SCHEMA}`, got `{}`", first.trim_end())));
        }
        let mut reader = csv::Reader::from_reader(input);
        let rows = reader.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?;
        Ok(ResultsTable { rows })
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED, |acc, &p| mix(acc ^ mix(p)))
}

fn hash_str(s: &str) -> u64 {
    derive_seed(&s.bytes().map(u64::from).collect::<Vec<_>>())
}

/// Runs one repeat of one setting: a fresh surface and population shared by
/// all methods, each method with its own noise and selection streams. The
/// data seed depends only on the generating process and the repeat, so
/// settings that differ only in privacy parameters see the same data.
pub fn run_repeat(setting: &ExperimentSetting, repeat: usize, master_seed: u64) -> Result<Vec<ResultRow>> {
    let dgp = &setting.dgp;
    let data_seed = derive_seed(&[
        master_seed,
        repeat as u64,
        dgp.amplitude.to_bits(),
        dgp.lengthscale.to_bits(),
        dgp.resolution as u64,
        dgp.population_size as u64,
    ]);
    let mut data_rng = ChaCha8Rng::seed_from_u64(data_seed);
    let surface = sample_gp_surface(dgp, &mut data_rng)?;
    let (population, dataset) = sample_population(&surface, dgp.population_size, &mut data_rng)?;
    let bounds = dgp.bounds()?;
    let oracle = oracle_policy_value(&population, setting.cost)?;
    let setting_key = hash_str(&setting.id());

    let run_method = |method: MethodSpec| -> Result<f64> {
        let method_key = hash_str(&method.to_string());
        let noise_seed = derive_seed(&[master_seed, setting_key, repeat as u64, method_key, 1]);
        let privacy = PrivacyConfig::new(setting.query_budget, setting.noise_scale, setting.min_count, noise_seed);
        let mut session = QuerySession::open(&dataset, privacy)?;
        let policy = match method {
            MethodSpec::Uniform => {
                let bins = balanced_bins(setting.query_budget, dgp.dim);
                run_uniform(&mut session, &bounds, &bins, setting.cost)?.0
            }
            MethodSpec::Strategic(family, size_mode) => {
                let mut af = AfConfig { family, size_mode, ..setting.strategy.af_for_budget(setting.query_budget, dgp.dim) };
                if family == AfFamily::FullPosterior {
                    af.candidate_count = af.candidate_count.min(AfConfig::with_family(family, size_mode).candidate_count);
                }
                let mut initial = dgp.hyperparams(setting.strategy.latent_noise_sd)?;
                for l in &mut initial.lengthscales {
                    *l *= setting.strategy.lengthscale_factor;
                }
                let fit = setting.strategy.fit_from_step.map(|step| FitConfig {
                    activation_step: step,
                    ..FitConfig::for_bounds(&bounds, initial.clone())
                });
                let config = StrategicRunConfig {
                    af,
                    fit,
                    cost: setting.cost,
                    resolution: setting.strategy.policy_resolution,
                    initial,
                    latent_noise: LatentNoise::PerQuery,
                };
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(&[master_seed, setting_key, repeat as u64, method_key, 2]));
                run_strategic(&mut session, &bounds, &config, &mut rng)?.policy
            }
        };
        policy_value_on_population(&policy, &population, setting.cost)
    };

    let uniform_value = run_method(MethodSpec::Uniform)?;
    Ok(setting
        .methods
        .iter()
        .map(|&method| {
            let result = if method == MethodSpec::Uniform { Ok(uniform_value) } else { run_method(method) };
            let (value, error) = match result {
                Ok(v) => (v, String::new()),
                Err(e) => (f64::NAN, e.to_string()),
            };
            ResultRow {
                setting_id: setting.id(),
                amplitude: dgp.amplitude,
                lengthscale: dgp.lengthscale,
                query_budget: setting.query_budget,
                noise_scale: setting.noise_scale,
                method: method.to_string(),
                repeat,
                policy_value: value,
                oracle_value: oracle,
                uniform_value,
                fraction_of_oracle: value / oracle,
                error,
            }
        })
        .collect())
}

/// Runs every repeat of every setting on a pool of `parallelism` threads.
/// Row order and values do not depend on scheduling.
pub fn run_settings(settings: &[ExperimentSetting], master_seed: u64, parallelism: usize) -> Result<ResultsTable> {
    for s in settings {
        s.validate()?;
    }
    let jobs: Vec<(usize, usize)> =
        settings.iter().enumerate().flat_map(|(i, s)| (0..s.repeats).map(move |r| (i, r))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let per_job: Vec<Vec<ResultRow>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, r)| {
                let s = &settings[i];
                run_repeat(s, r, master_seed).unwrap_or_else(|e| failed_rows(s, r, &e))
            })
            .collect()
    });
    Ok(ResultsTable { rows: per_job.into_iter().flatten().collect() })
}

pub fn run_setting(setting: &ExperimentSetting, master_seed: u64, parallelism: usize) -> Result<ResultsTable> {
    run_settings(std::slice::from_ref(setting), master_seed, parallelism)
}

fn failed_rows(setting: &ExperimentSetting, repeat: usize, err: &Error) -> Vec<ResultRow> {
    setting
        .methods
        .iter()
        .map(|m| ResultRow {
            setting_id: setting.id(),
            amplitude: setting.dgp.amplitude,
            lengthscale: setting.dgp.lengthscale,
            query_budget: setting.query_budget,
            noise_scale: setting.noise_scale,
            method: m.to_string(),
            repeat,
            policy_value: f64::NAN,
            oracle_value: f64::NAN,
            uniform_value: f64::NAN,
            fraction_of_oracle: f64::NAN,
            error: err.to_string(),
        })
        .collect()
}

/// `counts[focal][competitor]` is the number of settings in which the
/// competitor's policy value strictly exceeds the focal method's in at
/// least `threshold` of the (paired) repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceMatrix {
    pub methods: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl DominanceMatrix {
    /// Largest entry in the method's row; zero means no competitor
    /// dominates it in any setting.
    pub fn times_dominated(&self, method: &str) -> Option<usize> {
        let i = self.methods.iter().position(|m| m == method)?;
        self.counts[i].iter().copied().max()
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{RESULTS_SCHEMA}")?;
        writeln!(out, "focal,{}", self.methods.join(","))?;
        for (m, row) in self.methods.iter().zip(&self.counts) {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            writeln!(out, "{m},{}", cells.join(","))?;
        }
        Ok(())
    }
}

pub fn dominance_matrix(results: &ResultsTable, threshold: f64) -> Result<DominanceMatrix> {
    // setting -> method -> repeat -> value
    let mut by: BTreeMap<&str, BTreeMap<&str, BTreeMap<usize, f64>>> = BTreeMap::new();
    let mut methods = BTreeSet::new();
    for r in results.successful() {
        by.entry(&r.setting_id).or_default().entry(&r.method).or_default().insert(r.repeat, r.policy_value);
        methods.insert(r.method.as_str());
    }
    let methods: Vec<&str> = methods.into_iter().collect();
    let n = methods.len();
    let mut counts = vec![vec![0usize; n]; n];
    for (setting, per_method) in &by {
        let reps: Option<&BTreeMap<usize, f64>> = per_method.values().next();
        let keys: Vec<usize> = reps.map(|m| m.keys().copied().collect()).unwrap_or_default();
        for m in &methods {
            let have: Vec<usize> = per_method.get(m).map(|r| r.keys().copied().collect()).unwrap_or_default();
            if have != keys {
                return Err(Error::UnbalancedResults(format!("setting {setting}, method {m}")));
            }
        }
        for (fi, f) in methods.iter().enumerate() {
            for (ci, c) in methods.iter().enumerate() {
                if fi == ci {
                    continue;
                }
                let (fv, cv) = (&per_method[f], &per_method[c]);
                let wins = keys.iter().filter(|k| cv[k] > fv[k]).count();
                if !keys.is_empty() && wins as f64 >= threshold * keys.len() as f64 {
                    counts[fi][ci] += 1;
                }
            }
        }
    }
    Ok(DominanceMatrix { methods: methods.into_iter().map(String::from).collect(), counts })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dgp() -> DgpConfig {
        DgpConfig { amplitude: 2.0, lengthscale: 30.0, resolution: 6, population_size: 500, ..DgpConfig::default() }
    }

    #[test]
    fn interpolation_hits_nodes_and_is_linear_between() {
        let s = EffectSurface { lo: 0.0, hi: 10.0, dim: 2, resolution: 2, values: vec![0.0, 1.0, 2.0, 3.0] };
        assert_eq!(s.eval(&[0.0, 0.0]), 0.0);
        assert_eq!(s.eval(&[0.0, 10.0]), 1.0);
        assert_eq!(s.eval(&[10.0, 0.0]), 2.0);
        assert_eq!(s.eval(&[10.0, 10.0]), 3.0);
        assert!((s.eval(&[5.0, 5.0]) - 1.5).abs() < 1e-12);
        assert!((s.eval(&[2.5, 0.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn surface_is_deterministic() {
        let cfg = small_dgp();
        let a = sample_gp_surface(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_gp_surface(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values.len(), 216);
    }

    #[test]
    fn surface_matches_dense_factorization() {
        // the Kronecker sampler must equal L z for the dense Cholesky L of
        // the full Gram matrix under the same z
        let cfg = DgpConfig { amplitude: 1.5, lengthscale: 40.0, dim: 2, resolution: 4, ..DgpConfig::default() };
        let s = sample_gp_surface(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z: Vec<f64> = (0..16).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let pts: Vec<(f64, f64)> = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| (s.node(i), s.node(j))).collect();
        let k1 = |a: f64, b: f64| (-((a - b) / 40.0).powi(2)).exp() + if a == b { 1e-10 } else { 0.0 };
        let gram = DMatrix::from_fn(16, 16, |a, b| k1(pts[a].0, pts[b].0) * k1(pts[a].1, pts[b].1));
        let l = gram.cholesky().unwrap().l();
        for i in 0..16 {
            let expect: f64 = 1.5 * (0..16).map(|j| l[(i, j)] * z[j]).sum::<f64>();
            assert!((s.values[i] - expect).abs() < 1e-9, "{i}");
        }
    }

    #[test]
    fn population_contract() {
        let cfg = small_dgp();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sample_gp_surface(&cfg, &mut rng).unwrap();
        let (pop, ds) = sample_population(&s, 1000, &mut rng).unwrap();
        assert_eq!(pop.len(), 1000);
        assert_eq!(ds.len(), 1000);
        assert!(pop.covariates.iter().flatten().all(|&v| (0.0..=100.0).contains(&v)));
        for i in 0..1000 {
            let y = if ds.treatment()[i] { pop.true_effect[i] } else { 0.0 };
            assert_eq!(ds.outcome()[i], y);
        }
        // noiseless full-bounds query equals the treated-arm effect mean
        let mut sess = QuerySession::open(&ds, PrivacyConfig::new(1, 0.0, 0, 0)).unwrap();
        let rec = sess.execute_query(&cfg.bounds().unwrap().as_region()).unwrap();
        let treated: Vec<f64> = (0..1000).filter(|&i| ds.treatment()[i]).map(|i| pop.true_effect[i]).collect();
        let brute = treated.iter().sum::<f64>() / treated.len() as f64;
        assert!((rec.noisy_result.unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn method_names_round_trip() {
        for m in MethodSpec::simulation_all() {
            assert_eq!(m.to_string().parse::<MethodSpec>().unwrap(), m);
        }
        assert_eq!(MethodSpec::simulation_all().len(), 13);
        assert!("taaf/huge".parse::<MethodSpec>().is_err());
    }

    fn quick_setting(methods: Vec<MethodSpec>, repeats: usize) -> ExperimentSetting {
        let mut strategy = SimStrategy::default();
        strategy.af.candidate_count = 40;
        strategy.policy_resolution = 4;
        ExperimentSetting {
            dgp: small_dgp(),
            query_budget: 8,
            noise_scale: 1.0,
            min_count: 0,
            cost: 0.0,
            methods,
            repeats,
            strategy,
        }
    }

    #[test]
    fn run_setting_shape_and_shared_truth() {
        let s = quick_setting(vec![MethodSpec::Uniform, MethodSpec::Strategic(AfFamily::Taaf, SizeMode::None)], 3);
        let t = run_setting(&s, 7, 2).unwrap();
        assert_eq!(t.rows.len(), 6);
        for r in 0..3 {
            let rows: Vec<&ResultRow> = t.rows.iter().filter(|x| x.repeat == r).collect();
            assert_eq!(rows[0].oracle_value, rows[1].oracle_value);
            assert_eq!(rows[0].policy_value, rows[0].uniform_value);
            assert!(rows.iter().all(|x| x.fraction_of_oracle <= 1.0 + 1e-12));
        }
        let again = run_setting(&s, 7, 1).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn results_round_trip() {
        let s = quick_setting(vec![MethodSpec::Uniform], 2);
        let t = run_setting(&s, 1, 1).unwrap();
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        assert!(buf.starts_with(b"# schema_version=1\n"));
        assert_eq!(ResultsTable::read(&buf[..]).unwrap(), t);
    }

    fn row(setting: &str, method: &str, repeat: usize, v: f64) -> ResultRow {
        ResultRow {
            setting_id: setting.into(),
            amplitude: 1.0,
            lengthscale: 1.0,
            query_budget: 8,
            noise_scale: 1.0,
            method: method.into(),
            repeat,
            policy_value: v,
            oracle_value: 1.0,
            uniform_value: 0.0,
            fraction_of_oracle: v,
            error: String::new(),
        }
    }

    #[test]
    fn dominance_cases() {
        let mut rows = Vec::new();
        for r in 0..5 {
            rows.push(row("s1", "a", r, 2.0));
            rows.push(row("s1", "b", r, 1.0));
            rows.push(row("s2", "a", r, r as f64));
            rows.push(row("s2", "b", r, 2.0));
        }
        let m = dominance_matrix(&ResultsTable { rows: rows.clone() }, 0.95).unwrap();
        assert_eq!(m.methods, vec!["a", "b"]);
        assert_eq!(m.counts, vec![vec![0, 0], vec![1, 0]]);

        let same: Vec<ResultRow> = (0..4).flat_map(|r| [row("s", "a", r, 1.0), row("s", "b", r, 1.0)]).collect();
        let m = dominance_matrix(&ResultsTable { rows: same }, 0.95).unwrap();
        assert_eq!(m.counts, vec![vec![0, 0], vec![0, 0]]);

        rows.pop();
        assert!(matches!(dominance_matrix(&ResultsTable { rows }, 0.95), Err(Error::UnbalancedResults(_))));
    }

    #[test]
    fn dominance_three_methods_by_hand() {
        // s1: c beats a in 5/5, c beats b in 4/5; b beats a in 5/5.
        // s2: a beats b and c in 5/5; b and c tie.
        let mut rows = Vec::new();
        for r in 0..5 {
            rows.push(row("s1", "a", r, 0.0));
            rows.push(row("s1", "b", r, 1.0));
            rows.push(row("s1", "c", r, if r == 0 { 1.0 } else { 2.0 }));
            rows.push(row("s2", "a", r, 3.0));
            rows.push(row("s2", "b", r, 1.0));
            rows.push(row("s2", "c", r, 1.0));
        }
        let t = ResultsTable { rows };
        let m = dominance_matrix(&t, 0.95).unwrap();
        assert_eq!(m.counts, vec![vec![0, 1, 1], vec![1, 0, 0], vec![1, 0, 0]]);
        let m = dominance_matrix(&t, 0.8).unwrap();
        assert_eq!(m.counts, vec![vec![0, 1, 1], vec![1, 0, 1], vec![1, 0, 0]]);
        assert_eq!(m.times_dominated("c"), Some(1));
    }
}
