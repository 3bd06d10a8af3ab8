//! Platform-side query interface.
//!
//! A [`QuerySession`] answers difference-in-means queries over regions of
//! covariate space. Every answer is perturbed with Gaussian noise whose
//! standard deviation is `s / n`, where `n` is the number of rows (both arms)
//! inside the region. Queries touching fewer than `min_count` rows, or with an
//! empty arm, are suppressed; suppressed queries still consume budget.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{check_dim, Dataset, Region};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyConfig {
    pub query_budget: usize,
    pub noise_scale: f64,
    #[serde(default)]
    pub min_count: usize,
    #[serde(default)]
    pub seed: u64,
    /// Whether answers disclose the affected row counts.
    #[serde(default = "default_true")]
    pub disclose_counts: bool,
}

fn default_true() -> bool {
    true
}

impl PrivacyConfig {
    pub fn new(query_budget: usize, noise_scale: f64, min_count: usize, seed: u64) -> Self {
        PrivacyConfig { query_budget, noise_scale, min_count, seed, disclose_counts: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_budget == 0 {
            return Err(Error::InvalidConfig("query budget must be at least 1".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise scale must be >= 0, got {}", self.noise_scale)));
        }
        Ok(())
    }
}

/// What the querier learns from one query. The pre-noise statistic is never
/// stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub region: Region,
    pub noisy_result: Option<f64>,
    pub noise_sd: Option<f64>,
    pub affected_count: Option<usize>,
    pub treated_count: Option<usize>,
    pub control_count: Option<usize>,
    pub suppressed: bool,
}

#[derive(Debug)]
pub struct QuerySession<'a> {
    dataset: &'a Dataset,
    config: PrivacyConfig,
    noise: ChaCha20Rng,
    log: Vec<QueryRecord>,
}

impl<'a> QuerySession<'a> {
    pub fn open(dataset: &'a Dataset, config: PrivacyConfig) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        config.validate()?;
        let noise = ChaCha20Rng::seed_from_u64(config.seed);
        Ok(QuerySession { dataset, config, noise, log: Vec::new() })
    }

    pub fn config(&self) -> &PrivacyConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dataset.dim()
    }

    pub fn queries_used(&self) -> usize {
        self.log.len()
    }

    pub fn remaining_budget(&self) -> usize {
        self.config.query_budget - self.log.len()
    }

    pub fn audit_log(&self) -> &[QueryRecord] {
        &self.log
    }

    /// Answers one difference-in-means query over `region`.
    pub fn execute_query(&mut self, region: &Region) -> Result<QueryRecord> {
        check_dim(self.dataset.dim(), region.dim())?;
        if self.remaining_budget() == 0 {
            return Err(Error::BudgetExhausted { budget: self.config.query_budget });
        }
        let (mut sum_t, mut n_t, mut sum_c, mut n_c) = (0.0, 0usize, 0.0, 0usize);
        let ds = self.dataset;
        for ((x, &w), &y) in ds.covariates().iter().zip(ds.treatment()).zip(ds.outcome()) {
            if region.contains_unchecked(x) {
                if w {
                    sum_t += y;
                    n_t += 1;
                } else {
                    sum_c += y;
                    n_c += 1;
                }
            }
        }
        let count = n_t + n_c;
        let suppressed = count < self.config.min_count || n_t == 0 || n_c == 0;
        let (noisy_result, noise_sd) = if suppressed {
            (None, None)
        } else {
            let sd = self.config.noise_scale / count as f64;
            let z: f64 = StandardNormal.sample(&mut self.noise);
            (Some(sum_t / n_t as f64 - sum_c / n_c as f64 + sd * z), Some(sd))
        };
        let disclose = self.config.disclose_counts;
        let record = QueryRecord {
            region: region.clone(),
            noisy_result,
            noise_sd,
            affected_count: disclose.then_some(count),
            treated_count: disclose.then_some(n_t),
            control_count: disclose.then_some(n_c),
            suppressed,
        };
        self.log.push(record.clone());
        Ok(record)
    }
}

/// Writes records as JSON lines, one query per line.
pub fn write_audit_log<W: Write>(records: &[QueryRecord], mut out: W) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_audit_log(text: &str) -> Result<Vec<QueryRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Io(e.to_string())))
        .collect()
}
