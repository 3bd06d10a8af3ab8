//! Run configuration and the commands behind the command-line tool. Every
//! command validates the whole configuration before doing any work, and
//! artifacts are byte-identical for a fixed seed and configuration.

pub mod ingest;
pub mod query;
pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::write_audit_log;
use crate::policy_eval::{interval, ratio_summary, EvaluationReport, RatioSummary};
use crate::replica::{self, ReplicaConfig};
use crate::strategy::TargetingPolicy;
use crate::synth::{dominance_matrix, run_settings, GridSpec, ResultsTable, RESULTS_SCHEMA};

use ingest::{collapse_features, ingest_csv, CsvSchema};
use query::{run_query, QueryConfig, QueryMethod, QueryRun};
use report::{bar_chart, dominance_chart, line_chart, method_summary, parameter_summary, write_summary, Parameter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    #[serde(flatten)]
    pub grid: GridSpec,
    pub dominance_threshold: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { grid: GridSpec::default(), dominance_threshold: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub policy: PathBuf,
    pub dataset: PathBuf,
    pub schema: CsvSchema,
    pub keep: Vec<String>,
    pub sum_rest: bool,
    pub cost: f64,
    pub paper_literal_ipw: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            policy: PathBuf::from("policy.csv"),
            dataset: PathBuf::from("data.csv"),
            schema: CsvSchema::uplift_default(),
            keep: vec!["f0".into(), "f6".into()],
            sum_rest: true,
            cost: 0.01,
            paper_literal_ipw: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ReportConfig {
    /// Result tables written by `simulate`; rows are concatenated.
    pub results: Vec<PathBuf>,
    /// Optional dominance table to render as is.
    pub dominance: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    #[serde(flatten)]
    pub replica: ReplicaConfig,
    pub file_name: String,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig { replica: ReplicaConfig::default(), file_name: "replica.csv".into() }
    }
}

/// Top-level TOML configuration shared by all commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub parallelism: usize,
    pub simulate: SimulateConfig,
    pub query: QueryConfig,
    pub evaluate: EvaluateConfig,
    pub report: ReportConfig,
    pub generate: GenerateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 2024,
            out_dir: PathBuf::from("out"),
            parallelism: 1,
            simulate: SimulateConfig::default(),
            query: QueryConfig::default(),
            evaluate: EvaluateConfig::default(),
            report: ReportConfig::default(),
            generate: GenerateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.parallelism == 0 {
            return Err(Error::InvalidConfig("parallelism must be >= 1".into()));
        }
        for s in self.simulate.grid.settings() {
            s.validate()?;
        }
        if self.simulate.grid.settings().is_empty() {
            return Err(Error::InvalidConfig("simulation grid is empty".into()));
        }
        let t = self.simulate.dominance_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::InvalidConfig("dominance_threshold must be in (0, 1]".into()));
        }
        self.query.validate()?;
        if !(self.evaluate.cost.is_finite()) {
            return Err(Error::InvalidConfig("evaluate.cost must be finite".into()));
        }
        if self.generate.file_name.is_empty() || self.generate.file_name.contains('/') {
            return Err(Error::InvalidConfig("generate.file_name must be a plain file name".into()));
        }
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(path.to_path_buf())
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Renders every table and chart derived from a results table, in memory.
fn simulation_artifacts(table: &ResultsTable, threshold: f64) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let methods = method_summary(table)?;
    let mut buf = Vec::new();
    write_summary(&methods, "group", &mut buf)?;
    out.push(("summary_methods.csv".to_string(), buf));
    out.push(("fraction_by_method.svg".to_string(), bar_chart(&methods, "Fraction of oracle value").into_bytes()));
    for p in Parameter::ALL {
        let rows = parameter_summary(table, p)?;
        let mut buf = Vec::new();
        write_summary(&rows, p.name(), &mut buf)?;
        out.push((format!("summary_by_{}.csv", p.name()), buf));
        let title = format!("Fraction of oracle value by {}", p.name());
        out.push((format!("fraction_by_{}.svg", p.name()), line_chart(&rows, &title).into_bytes()));
    }
    let dom = dominance_matrix(table, threshold)?;
    let mut buf = Vec::new();
    dom.write(&mut buf)?;
    out.push(("dominance.csv".to_string(), buf));
    out.push(("dominance.svg".to_string(), dominance_chart(&dom).into_bytes()));
    Ok(out)
}

fn flush(dir: &Path, artifacts: Vec<(String, Vec<u8>)>) -> Result<Vec<PathBuf>> {
    artifacts.into_iter().map(|(name, bytes)| write_file(&dir.join(name), &bytes)).collect()
}

/// Runs the synthetic grid and writes the raw results with their summaries.
/// Failed repeats stay in the results table with their error message.
pub fn cmd_simulate(config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let settings = config.simulate.grid.settings();
    let table = run_settings(&settings, config.seed, config.parallelism)?;
    let mut buf = Vec::new();
    table.write(&mut buf)?;
    let mut written = vec![write_file(&config.out_dir.join("results.csv"), &buf)?];
    // summaries need at least one successful run; the raw table is kept either way
    written.extend(flush(&config.out_dir, simulation_artifacts(&table, config.simulate.dominance_threshold)?)?);
    Ok(written)
}

/// Aggregate over bootstraps for one (budget, noise scale, method).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryReport {
    pub query_budget: usize,
    pub noise_scale: f64,
    pub method: QueryMethod,
    pub cost: f64,
    pub policy_value: RatioSummary,
    pub lift_vs_treat_all: RatioSummary,
    pub treat_all_value: RatioSummary,
    /// Mean of the per-bootstrap standard errors of the lift.
    pub mean_standard_error: f64,
    pub bootstraps: Vec<EvaluationReport>,
}

/// Ratio of strategic to uniform policy value, from per-bootstrap ratios.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryComparison {
    pub query_budget: usize,
    pub noise_scale: f64,
    pub ratio: RatioSummary,
}

fn query_reports(runs: &[QueryRun], cost: f64) -> Result<Vec<QueryReport>> {
    let mut groups: BTreeMap<(usize, u64, &'static str), Vec<&QueryRun>> = BTreeMap::new();
    for r in runs {
        groups.entry((r.query_budget, r.noise_scale.to_bits(), r.method.name())).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let pick = |f: fn(&EvaluationReport) -> f64| g.iter().map(|r| f(&r.report)).collect::<Vec<f64>>();
            Ok(QueryReport {
                query_budget: g[0].query_budget,
                noise_scale: g[0].noise_scale,
                method: g[0].method,
                cost,
                policy_value: interval(&pick(|r| r.policy_value))?,
                lift_vs_treat_all: interval(&pick(|r| r.lift_vs_treat_all))?,
                treat_all_value: interval(&pick(|r| r.treat_all_value))?,
                mean_standard_error: pick(|r| r.standard_error).iter().sum::<f64>() / g.len() as f64,
                bootstraps: g.iter().map(|r| r.report.clone()).collect(),
            })
        })
        .collect()
}

fn query_comparisons(runs: &[QueryRun]) -> Result<Vec<QueryComparison>> {
    let mut pairs: BTreeMap<(usize, u64), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in runs {
        let e = pairs.entry((r.query_budget, r.noise_scale.to_bits())).or_default();
        match r.method {
            QueryMethod::Strategic => e.0.push(r.report.policy_value),
            QueryMethod::Uniform => e.1.push(r.report.policy_value),
        }
    }
    pairs
        .into_iter()
        .filter(|(_, (s, u))| !s.is_empty() && s.len() == u.len())
        .map(|((q, s), (num, den))| {
            Ok(QueryComparison { query_budget: q, noise_scale: f64::from_bits(s), ratio: ratio_summary(&num, &den)? })
        })
        .collect()
}

/// Bootstrapped querying on an experimental dataset. Writes one report per
/// (budget, noise scale, method), every policy and audit log, and a summary
/// of strategic over uniform value ratios.
pub fn cmd_query(config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let q = &config.query;
    let raw = ingest_csv(&q.dataset, &q.schema)?;
    let data = collapse_features(&raw, &q.keep, q.sum_rest)?;
    let outcome = run_query(q, &data, config.seed, config.parallelism)?;

    let mut artifacts: Vec<(String, Vec<u8>)> = Vec::new();
    for rep in query_reports(&outcome.runs, q.cost)? {
        let name = format!("reports/q{}_s{}_{}.json", rep.query_budget, rep.noise_scale, rep.method.name());
        artifacts.push((name, to_json(&rep)?));
    }
    for r in &outcome.runs {
        let stem = format!("q{}_s{}_{}_b{}", r.query_budget, r.noise_scale, r.method.name(), r.bootstrap);
        let mut buf = Vec::new();
        r.policy.write(&mut buf)?;
        artifacts.push((format!("policies/{stem}.csv"), buf));
        let mut buf = Vec::new();
        write_audit_log(&r.records, &mut buf)?;
        artifacts.push((format!("audit/{stem}.jsonl"), buf));
    }
    let mut summary = format!("{RESULTS_SCHEMA}\nquery_budget,noise_scale,ratio_mean,ratio_se,ratio_lo,ratio_hi,count\n");
    for c in query_comparisons(&outcome.runs)? {
        let r = c.ratio;
        summary.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.query_budget, c.noise_scale, r.mean, r.standard_error, r.lo, r.hi, r.count
        ));
    }
    artifacts.push(("summary.csv".into(), summary.into_bytes()));
    let names: Vec<String> = data.names.clone();
    artifacts.push(("features.txt".into(), format!("{}\n", names.join(",")).into_bytes()));
    flush(&config.out_dir, artifacts)
}

/// Evaluates a saved policy on a dataset by inverse propensity weighting.
pub fn cmd_evaluate(config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let e = &config.evaluate;
    let policy = TargetingPolicy::read(BufReader::new(fs::File::open(&e.policy)?))?;
    let raw = ingest_csv(&e.dataset, &e.schema)?;
    let data = collapse_features(&raw, &e.keep, e.sum_rest)?;
    if data.data.dim() != policy.bounds().dim() {
        return Err(Error::DimensionMismatch { expected: policy.bounds().dim(), got: data.data.dim() });
    }
    let report = EvaluationReport::on_dataset(&policy, &data.data, e.cost, e.paper_literal_ipw)?;
    Ok(vec![write_file(&config.out_dir.join("evaluation.json"), &to_json(&report)?)?])
}

/// Rebuilds summaries and charts from saved result tables. Nothing is
/// written unless every input parses and holds at least one successful run.
pub fn cmd_report(config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let r = &config.report;
    if r.results.is_empty() && r.dominance.is_none() {
        return Err(Error::InvalidConfig("report needs at least one results table or a dominance table".into()));
    }
    let mut artifacts = Vec::new();
    if !r.results.is_empty() {
        let mut table = ResultsTable::default();
        for path in &r.results {
            let part = ResultsTable::read(BufReader::new(fs::File::open(path)?))?;
            table.rows.extend(part.rows);
        }
        if table.successful().next().is_none() {
            return Err(Error::Ingest("results contain no successful runs".into()));
        }
        artifacts.extend(simulation_artifacts(&table, config.simulate.dominance_threshold)?);
    }
    if let Some(path) = &r.dominance {
        let m = report::read_dominance(&fs::read_to_string(path)?)?;
        artifacts.push(("dominance_input.svg".into(), dominance_chart(&m).into_bytes()));
    }
    flush(&config.out_dir, artifacts)
}

/// Writes the synthetic uplift dataset used for the empirical walk-through.
pub fn cmd_generate(config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let rows = replica::generate(&config.generate.replica)?;
    let path = config.out_dir.join(&config.generate.file_name);
    let mut buf = Vec::new();
    replica::write_csv(&rows, &mut buf)?;
    Ok(vec![write_file(&path, &buf)?])
}
