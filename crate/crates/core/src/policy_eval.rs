//! Policy values: ground truth on synthetic populations, inverse propensity
//! weighting on experimental data, and lift summaries.
//!
//! All values are increments over the all-control policy.

use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, Population};
use crate::error::{Error, Result};
use crate::strategy::{Action, Policy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub policy_value: f64,
    pub treat_all_value: f64,
    pub control_all_value: f64,
    pub lift_vs_treat_all: f64,
    /// `(policy - best blanket) / (oracle - best blanket)`; only with a
    /// ground-truth population whose oracle beats both blanket policies.
    pub oracle_fraction: Option<f64>,
    pub standard_error: f64,
}

impl EvaluationReport {
    /// Exact values on a population with known effects.
    pub fn on_population(policy: &impl Policy, population: &Population, cost: f64) -> Result<Self> {
        let value = policy_value_on_population(policy, population, cost)?;
        let treat_all = mean(&population.true_effect)? - cost;
        let oracle = oracle_policy_value(population, cost)?;
        let blanket = treat_all.max(0.0);
        let oracle_fraction = (oracle > blanket).then(|| (value - blanket) / (oracle - blanket));
        Ok(EvaluationReport {
            policy_value: value,
            treat_all_value: treat_all,
            control_all_value: 0.0,
            lift_vs_treat_all: lift_vs_treat_all(value, treat_all),
            oracle_fraction,
            standard_error: 0.0,
        })
    }

    /// IPW estimates on held-out experimental data. The standard error is
    /// that of the lift, computed from paired per-unit differences.
    pub fn on_dataset(policy: &impl Policy, data: &Dataset, cost: f64, paper_literal: bool) -> Result<Self> {
        let terms = ipw_terms(policy, data, cost, paper_literal)?;
        let all = ipw_terms(&|_: &[f64]| Action::Treat, data, cost, paper_literal)?;
        let none = ipw_terms(&|_: &[f64]| Action::Control, data, cost, paper_literal)?;
        let diff: Vec<f64> = terms.iter().zip(&all).map(|(a, b)| a - b).collect();
        let (value, treat_all, control_all) = (mean(&terms)?, mean(&all)?, mean(&none)?);
        Ok(EvaluationReport {
            policy_value: value - control_all,
            treat_all_value: treat_all - control_all,
            control_all_value: 0.0,
            lift_vs_treat_all: lift_vs_treat_all(value, treat_all),
            oracle_fraction: None,
            standard_error: std_error(&diff),
        })
    }
}

/// Value of treating exactly where the true effect exceeds the cost.
pub fn oracle_policy_value(population: &Population, cost: f64) -> Result<f64> {
    mean(&population.true_effect.iter().map(|t| (t - cost).max(0.0)).collect::<Vec<_>>())
}

/// `(1/N) Σ (τ_i - c) 1{π(x_i) = treat}`.
pub fn policy_value_on_population(policy: &impl Policy, population: &Population, cost: f64) -> Result<f64> {
    if population.covariates.len() != population.true_effect.len() {
        return Err(Error::InvalidConfig("population covariates and effects differ in length".into()));
    }
    let mut total = 0.0;
    for (x, t) in population.covariates.iter().zip(&population.true_effect) {
        if policy.action(x)? == Action::Treat {
            total += t - cost;
        }
    }
    if population.true_effect.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(total / population.true_effect.len() as f64)
}

/// Per-unit IPW contributions. The default is the matched-arm estimator;
/// `paper_literal` weights every unit by the propensity of the arm the
/// policy picks, whether or not the unit received that arm.
pub fn ipw_terms(policy: &impl Policy, data: &Dataset, cost: f64, paper_literal: bool) -> Result<Vec<f64>> {
    let e = data.propensity();
    data.covariates()
        .iter()
        .zip(data.treatment())
        .zip(data.outcome())
        .map(|((x, &w), &y)| {
            let treat = policy.action(x)? == Action::Treat;
            Ok(match (treat, w) {
                (true, _) if paper_literal => (y - cost) / e,
                (false, _) if paper_literal => y / (1.0 - e),
                (true, true) => (y - cost) / e,
                (false, false) => y / (1.0 - e),
                _ => 0.0,
            })
        })
        .collect()
}

/// IPW estimate of the policy's value and its standard error.
pub fn ipw_value(policy: &impl Policy, data: &Dataset, cost: f64, paper_literal: bool) -> Result<(f64, f64)> {
    let terms = ipw_terms(policy, data, cost, paper_literal)?;
    Ok((mean(&terms)?, std_error(&terms)))
}

pub fn lift_vs_treat_all(policy_value: f64, treat_all_value: f64) -> f64 {
    policy_value - treat_all_value
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub mean: f64,
    pub standard_error: f64,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Normal-approximation 95% interval for a method/baseline ratio, computed
/// on per-repeat ratios because the two estimates share data. Repeats with
/// a zero or non-finite ratio are dropped.
pub fn ratio_summary(numer: &[f64], denom: &[f64]) -> Result<RatioSummary> {
    if numer.len() != denom.len() {
        return Err(Error::DimensionMismatch { expected: numer.len(), got: denom.len() });
    }
    let ratios: Vec<f64> = numer.iter().zip(denom).map(|(a, b)| a / b).filter(|r| r.is_finite()).collect();
    interval(&ratios)
}

/// Mean with a normal-approximation 95% interval.
pub fn interval(values: &[f64]) -> Result<RatioSummary> {
    let m = mean(values)?;
    let se = std_error(values);
    Ok(RatioSummary { mean: m, standard_error: se, lo: m - 1.96 * se, hi: m + 1.96 * se, count: values.len() })
}

pub(crate) fn mean(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Sample standard deviation over √n; zero for fewer than two values.
pub(crate) fn std_error(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Bounds;
    use crate::strategy::TargetingPolicy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pop(effects: &[f64]) -> Population {
        let covariates = (0..effects.len()).map(|i| vec![i as f64]).collect();
        Population { covariates, true_effect: effects.to_vec() }
    }

    /// Treats units placed at x >= 1; the toy populations put their
    /// positive effects there.
    fn by_sign(x: &[f64]) -> Action {
        if x[0] >= 1.0 {
            Action::Treat
        } else {
            Action::Control
        }
    }

    #[test]
    fn oracle_cases() {
        assert!((oracle_policy_value(&pop(&[5.0; 4]), 0.01).unwrap() - 4.99).abs() < 1e-12);
        assert_eq!(oracle_policy_value(&pop(&[-1.0; 3]), 0.0).unwrap(), 0.0);
        assert_eq!(oracle_policy_value(&pop(&[-1.0, 1.0]), 0.0).unwrap(), 0.5);
    }

    #[test]
    fn population_value_cases() {
        let p = pop(&[-1.0, 1.0]);
        let all = |_: &[f64]| Action::Treat;
        let none = |_: &[f64]| Action::Control;
        assert!((policy_value_on_population(&all, &p, 0.1).unwrap() - -0.1).abs() < 1e-12);
        assert_eq!(policy_value_on_population(&none, &p, 0.1).unwrap(), 0.0);
        let sign = by_sign;
        assert_eq!(
            policy_value_on_population(&sign, &p, 0.0).unwrap(),
            oracle_policy_value(&p, 0.0).unwrap()
        );
    }

    #[test]
    fn non_total_policy_is_an_error() {
        let b = Bounds::from_pairs(&[(0.0, 0.5)]).unwrap();
        let policy = TargetingPolicy::constant(b, Action::Treat);
        assert!(matches!(
            policy_value_on_population(&policy, &pop(&[1.0, 2.0]), 0.0),
            Err(Error::PolicyNotTotal { .. })
        ));
    }

    #[test]
    fn ipw_two_unit_example() {
        let d = Dataset::new(vec![vec![1.0], vec![0.0]], vec![true, false], vec![1.0, 0.4], 0.5).unwrap();
        let sign = by_sign;
        let (est, _) = ipw_value(&sign, &d, 0.0, false).unwrap();
        assert!((est - 1.4).abs() < 1e-12);
        let (lit, _) = ipw_value(&sign, &d, 0.0, true).unwrap();
        assert!((lit - 1.4).abs() < 1e-12);
    }

    #[test]
    fn ipw_weights_and_literal_form() {
        // unit A: W=0, Y=0.3, policy treats; unit B: W=1, Y=2, policy controls
        let d = Dataset::new(vec![vec![1.0], vec![0.0]], vec![false, true], vec![0.3, 2.0], 0.85).unwrap();
        let sign = by_sign;
        let terms = ipw_terms(&sign, &d, 0.01, false).unwrap();
        assert_eq!(terms, vec![0.0, 0.0]);
        let lit = ipw_terms(&sign, &d, 0.01, true).unwrap();
        assert!((lit[0] - 0.29 / 0.85).abs() < 1e-12);
        assert!((lit[1] - 2.0 / 0.15).abs() < 1e-12);
        let all = |_: &[f64]| Action::Treat;
        let t = ipw_terms(&all, &Dataset::new(vec![vec![0.0]], vec![true], vec![1.0], 0.85).unwrap(), 0.0, false)
            .unwrap();
        assert!((t[0] - 1.0 / 0.85).abs() < 1e-12);
    }

    #[test]
    fn lift_cases() {
        assert!((lift_vs_treat_all(1.4, 1.0) - 0.4).abs() < 1e-12);
        assert_eq!(lift_vs_treat_all(0.7, 0.7), 0.0);
        assert!(lift_vs_treat_all(0.2, 0.5) < 0.0);
    }

    #[test]
    fn oracle_fraction_definition() {
        let p = pop(&[-1.0, 1.0, 2.0, -0.5]);
        let sign = |x: &[f64]| if x[0] == 1.0 || x[0] == 2.0 { Action::Treat } else { Action::Control };
        let r = EvaluationReport::on_population(&sign, &p, 0.0).unwrap();
        assert_eq!(r.oracle_fraction, Some(1.0));
        let all = |_: &[f64]| Action::Treat;
        let r = EvaluationReport::on_population(&all, &p, 0.0).unwrap();
        assert_eq!(r.oracle_fraction, Some(0.0));
        assert_eq!(r.lift_vs_treat_all, 0.0);
        let r = EvaluationReport::on_population(&all, &pop(&[1.0, 1.0]), 0.0).unwrap();
        assert_eq!(r.oracle_fraction, None);
    }

    #[test]
    fn ratio_uses_per_repeat_ratios() {
        let s = ratio_summary(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.standard_error, 0.0);
        let s = ratio_summary(&[1.0, 3.0], &[1.0, 1.0]).unwrap();
        assert!((s.standard_error - 1.0).abs() < 1e-12);
        assert!((s.hi - s.lo - 3.92).abs() < 1e-12);
        assert!(ratio_summary(&[1.0], &[1.0, 2.0]).is_err());
    }

    /// Randomized experiment on [0,1] with τ(x) = x - 0.4 and Y0 = 1 + x.
    fn experiment(n: usize, e: f64, seed: u64) -> (Dataset, Population) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let w: Vec<bool> = (0..n).map(|_| rng.gen_bool(e)).collect();
        let tau: Vec<f64> = xs.iter().map(|x| x - 0.4).collect();
        let y = xs
            .iter()
            .zip(&w)
            .zip(&tau)
            .map(|((x, &w), t)| 1.0 + x + if w { *t } else { 0.0 } + rng.gen_range(-0.1..0.1))
            .collect();
        let cov: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        (Dataset::new(cov.clone(), w, y, e).unwrap(), Population { covariates: cov, true_effect: tau })
    }

    #[test]
    fn treat_all_ipw_matches_ground_truth() {
        let (d, _) = experiment(10_000, 0.5, 3);
        let all = |_: &[f64]| Action::Treat;
        let (est, se) = ipw_value(&all, &d, 0.01, false).unwrap();
        // E[Y1] - c = E[1 + x + x - 0.4] - 0.01 = 1.6 - 0.01
        assert!((est - 1.59).abs() < 3.0 * se, "{est} {se}");
    }

    #[test]
    fn ipw_is_unbiased_over_seeds() {
        let policy = |x: &[f64]| if x[0] > 0.6 { Action::Treat } else { Action::Control };
        let cost = 0.01;
        let mut est = Vec::new();
        let mut ses = Vec::new();
        for seed in 0..200 {
            let (d, _) = experiment(500, 0.85, 1000 + seed);
            let (v, se) = ipw_value(&policy, &d, cost, false).unwrap();
            est.push(v);
            ses.push(se);
        }
        // value with Y0 included: E[1 + x] + E[(x - 0.4 - c) 1{x > 0.6}]
        let truth = 1.5 + (0.5 * (1.0 - 0.36) - (0.4 + cost) * 0.4);
        let m = mean(&est).unwrap();
        let combined = (ses.iter().map(|s| s * s).sum::<f64>()).sqrt() / 200.0;
        assert!((m - truth).abs() < 3.0 * combined, "{m} {truth} {combined}");
    }
}
