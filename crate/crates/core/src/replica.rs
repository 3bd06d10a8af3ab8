//! Synthetic stand-in for a large randomized uplift dataset: twelve
//! anonymized-looking features, a lopsided treatment split, a rare binary
//! visit outcome, and a planted treatment effect that depends on two of the
//! features only.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURES: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplicaConfig {
    pub rows: usize,
    pub propensity: f64,
    pub seed: u64,
}

impl Default for ReplicaConfig {
    fn default() -> Self {
        ReplicaConfig { rows: 200_000, propensity: 0.85, seed: 12 }
    }
}

/// Planted effect of treatment on the visit probability. Depends on `f0`
/// and `f6` only, through a smooth ramp along a diagonal, ranging over
/// (-0.02, 0.04).
pub fn planted_effect(f0: f64, f6: f64) -> f64 {
    0.01 + 0.03 * ((f0 - 21.0) / 4.0 + (f6 + 2.4) / 3.0).tanh()
}

fn base_visit(z1: f64) -> f64 {
    0.04 + 0.02 / (1.0 + (-z1).exp())
}

/// Typical values of the features that are nearly constant.
const LEVELS: [f64; FEATURES] = [0.0, 10.06, 8.21, 4.68, 10.28, 4.12, 0.0, 4.83, 3.91, 13.19, 5.30, -0.17];

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaRow {
    pub features: [f64; FEATURES],
    pub treatment: bool,
    pub visit: bool,
}

/// Features share a common factor. `f0` has a tight low cluster (about 28%
/// of rows, negative effect), a main mode straddling the effect threshold
/// and a flat spread over the whole range; `f6` is left-skewed with a flat
/// spread as well. Of the other ten features most sit on a single value,
/// with `f9` spreading widely for a fifth of the rows.
pub fn generate(config: &ReplicaConfig) -> Result<Vec<ReplicaRow>> {
    if config.rows == 0 || !(config.propensity > 0.0 && config.propensity < 1.0) {
        return Err(Error::InvalidConfig("need rows >= 1 and propensity in (0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rows = Vec::with_capacity(config.rows);
    for _ in 0..config.rows {
        let common: f64 = rng.sample(StandardNormal);
        let z: Vec<f64> = (0..FEATURES)
            .map(|_| 0.5 * common + 0.75f64.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut f = LEVELS;
        let u: f64 = rng.gen();
        f[0] = if u < 0.28 {
            12.6 + 0.05 * z[0].abs()
        } else if u < 0.83 {
            21.9 + 2.4 * z[0]
        } else {
            rng.gen_range(12.0..36.0)
        };
        f[6] = if rng.gen_bool(0.85) { -2.4 + 2.8 * z[6] - 0.5 * z[6] * z[6] } else { rng.gen_range(-20.0..1.5) };
        for (i, v) in f.iter_mut().enumerate() {
            if i == 0 || i == 6 {
                continue;
            }
            if i == 9 && rng.gen_bool(0.2) {
                *v += rng.gen_range(0.0..30.0);
            } else if rng.gen_bool(0.15) {
                *v += 0.5 * z[i];
            }
        }
        let treatment = rng.gen_bool(config.propensity);
        let p = base_visit(z[1]) + if treatment { planted_effect(f[0], f[6]) } else { 0.0 };
        let visit = rng.gen_bool(p.clamp(0.0, 1.0));
        rows.push(ReplicaRow { features: f, treatment, visit });
    }
    Ok(rows)
}

pub fn header() -> Vec<String> {
    let mut h: Vec<String> = (0..FEATURES).map(|i| format!("f{i}")).collect();
    h.push("treatment".into());
    h.push("visit".into());
    h
}

/// Writes the rows as CSV with columns `f0..f11,treatment,visit`.
pub fn write_csv<W: Write>(rows: &[ReplicaRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header())?;
    for r in rows {
        let mut rec: Vec<String> = r.features.iter().map(|v| v.to_string()).collect();
        rec.push(u8::from(r.treatment).to_string());
        rec.push(u8::from(r.visit).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
