//! Command-level behavior: configuration handling and artifact writing.

use std::path::Path;

use privtarget::app::query::{QueryConfig, QueryMethod};
use privtarget::app::{cmd_evaluate, cmd_generate, cmd_query, cmd_report, cmd_simulate, RunConfig};
use privtarget::policy_eval::EvaluationReport;
use privtarget::replica::ReplicaConfig;
use privtarget::synth::{GridSpec, ResultsTable};
use privtarget::Error;

fn small_grid() -> GridSpec {
    GridSpec {
        lengthscales: vec![30.0],
        query_budgets: vec![8],
        noise_scales: vec![1.0],
        repeats: 2,
        resolution: 8,
        population_size: 800,
        ..GridSpec::default()
    }
}

fn files_under(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().display().to_string());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn default_config_round_trips_through_toml() {
    let cfg = RunConfig::default();
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    // an empty file means all defaults
    assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
}

#[test]
fn partial_config_keeps_other_defaults() {
    let cfg = RunConfig::from_toml("seed = 7\n[query]\nbootstraps = 3\n[simulate]\nrepeats = 4\n").unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.query.bootstraps, 3);
    assert_eq!(cfg.simulate.grid.repeats, 4);
    assert_eq!(cfg.query.query_budgets, QueryConfig::default().query_budgets);
}

#[test]
fn invalid_configs_are_rejected() {
    for text in [
        "bogus = 1\n",
        "parallelism = 0\n",
        "[query]\nquery_budgets = []\n",
        "[query]\nbudget_scaled_sizes = [2.0, 1.0]\n",
        "[simulate]\ndominance_threshold = 1.5\n",
        "[generate]\nfile_name = \"a/b.csv\"\n",
    ] {
        assert!(matches!(RunConfig::from_toml(text), Err(Error::InvalidConfig(_))), "{text}");
    }
}

#[test]
fn report_without_inputs_fails_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = RunConfig { out_dir: out.clone(), ..RunConfig::default() };
    assert!(matches!(cmd_report(&cfg), Err(Error::InvalidConfig(_))));
    assert!(!out.exists());

    // a results table with no rows at all
    let empty = tmp.path().join("empty.csv");
    ResultsTable::default().write(std::fs::File::create(&empty).unwrap()).unwrap();
    let mut cfg = cfg;
    cfg.report.results = vec![empty];
    assert!(matches!(cmd_report(&cfg), Err(Error::Ingest(_))));
    assert!(!out.exists());
}

#[test]
fn simulate_then_report_rebuilds_the_same_summaries() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig { out_dir: tmp.path().join("sim"), ..RunConfig::default() };
    cfg.simulate.grid = small_grid();
    let written = cmd_simulate(&cfg).unwrap();
    assert!(written.iter().any(|p| p.ends_with("results.csv")));
    assert!(written.iter().any(|p| p.ends_with("dominance.csv")));

    let mut rep = cfg.clone();
    rep.out_dir = tmp.path().join("report");
    rep.report.results = vec![cfg.out_dir.join("results.csv")];
    rep.report.dominance = Some(cfg.out_dir.join("dominance.csv"));
    cmd_report(&rep).unwrap();
    for name in ["summary_methods.csv", "dominance.csv", "fraction_by_method.svg"] {
        let a = std::fs::read(cfg.out_dir.join(name)).unwrap();
        let b = std::fs::read(rep.out_dir.join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    assert!(rep.out_dir.join("dominance_input.svg").exists());
}

#[test]
fn generate_query_evaluate_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig { out_dir: tmp.path().to_path_buf(), seed: 3, ..RunConfig::default() };
    cfg.generate.replica = ReplicaConfig { rows: 8000, ..ReplicaConfig::default() };
    let data = cmd_generate(&cfg).unwrap().remove(0);

    cfg.out_dir = tmp.path().join("query");
    cfg.query = QueryConfig {
        dataset: data.clone(),
        train_size: 4000,
        eval_size: 4000,
        bootstraps: 2,
        query_budgets: vec![8],
        noise_scales: vec![0.1],
        ..QueryConfig::default()
    };
    cmd_query(&cfg).unwrap();
    let files = files_under(&cfg.out_dir);
    for method in [QueryMethod::Uniform, QueryMethod::Strategic] {
        let tag = method.name();
        let policies = files.iter().filter(|f| f.starts_with("policies/") && f.contains(tag)).count();
        let audits = files.iter().filter(|f| f.starts_with("audit/") && f.contains(tag)).count();
        assert_eq!((policies, audits), (2, 2), "{tag}: {files:?}");
    }
    assert!(files.contains(&"summary.csv".to_string()));

    let policy = files.iter().find(|f| f.starts_with("policies/")).unwrap();
    cfg.evaluate.policy = cfg.out_dir.join(policy);
    cfg.evaluate.dataset = data;
    cfg.out_dir = tmp.path().join("eval");
    cmd_evaluate(&cfg).unwrap();
    let report: EvaluationReport =
        serde_json::from_slice(&std::fs::read(cfg.out_dir.join("evaluation.json")).unwrap()).unwrap();
    assert!(report.standard_error > 0.0);
    assert!((report.lift_vs_treat_all - (report.policy_value - report.treat_all_value)).abs() < 1e-12);

    // a policy over other covariates is refused
    cfg.evaluate.keep = vec!["f0".into()];
    cfg.evaluate.sum_rest = false;
    assert!(matches!(cmd_evaluate(&cfg), Err(Error::DimensionMismatch { .. })));
}
