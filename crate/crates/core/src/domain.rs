//! Geometric and data types shared across the crate.
//!
//! Intervals are closed on both ends: a point sitting exactly on a region
//! boundary belongs to that region.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// Axis-aligned hyperrectangle in covariate space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub sides: Vec<Interval>,
}

impl Region {
    /// Builds a region, checking `lo <= hi` on every side.
    pub fn new(sides: Vec<Interval>) -> Result<Self> {
        for (dim, s) in sides.iter().enumerate() {
            if !(s.lo <= s.hi) || !s.lo.is_finite() || !s.hi.is_finite() {
                return Err(Error::InvalidInterval { dim, lo: s.lo, hi: s.hi });
            }
        }
        Ok(Region { sides })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Region::new(pairs.iter().map(|&(lo, hi)| Interval::new(lo, hi)).collect())
    }

    pub fn dim(&self) -> usize {
        self.sides.len()
    }

    /// Product of side widths; zero when any side is degenerate.
    pub fn volume(&self) -> f64 {
        self.sides.iter().map(Interval::width).product()
    }

    /// Closed-interval membership test.
    pub fn contains(&self, point: &[f64]) -> Result<bool> {
        check_dim(self.dim(), point.len())?;
        Ok(self.contains_unchecked(point))
    }

    /// True when `other` lies entirely inside this region.
    pub fn contains_region(&self, other: &Region) -> bool {
        self.dim() == other.dim() && self.sides.iter().zip(&other.sides).all(|(a, b)| a.lo <= b.lo && b.hi <= a.hi)
    }

    pub(crate) fn contains_unchecked(&self, point: &[f64]) -> bool {
        self.sides.iter().zip(point).all(|(s, &x)| s.contains(x))
    }

    /// Per-dimension intersection with `bounds`.
    pub fn clip(&self, bounds: &Bounds) -> Result<Region> {
        check_dim(bounds.dim(), self.dim())?;
        let mut sides = Vec::with_capacity(self.dim());
        for (dim, (s, b)) in self.sides.iter().zip(&bounds.sides).enumerate() {
            let lo = s.lo.max(b.lo);
            let hi = s.hi.min(b.hi);
            if lo > hi {
                return Err(Error::EmptyIntersection { dim });
            }
            sides.push(Interval::new(lo, hi));
        }
        Ok(Region { sides })
    }

    /// Side length of each dimension as a fraction of the bounds' extent.
    pub fn side_fractions(&self, bounds: &Bounds) -> Vec<f64> {
        self.sides
            .iter()
            .zip(&bounds.sides)
            .map(|(s, b)| (s.width() / b.width()).clamp(0.0, 1.0))
            .collect()
    }

    /// Index of the first side with zero width, if any.
    pub fn degenerate_dim(&self) -> Option<usize> {
        self.sides.iter().position(|s| !(s.width() > 0.0))
    }

    pub fn center(&self) -> Vec<f64> {
        self.sides.iter().map(|s| 0.5 * (s.lo + s.hi)).collect()
    }
}

/// Ambient covariate box; every side has `lo < hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub sides: Vec<Interval>,
}

impl Bounds {
    pub fn new(sides: Vec<Interval>) -> Result<Self> {
        if sides.is_empty() {
            return Err(Error::InvalidConfig("bounds need at least one dimension".into()));
        }
        for (dim, s) in sides.iter().enumerate() {
            if !(s.lo < s.hi) || !s.lo.is_finite() || !s.hi.is_finite() {
                return Err(Error::InvalidInterval { dim, lo: s.lo, hi: s.hi });
            }
        }
        Ok(Bounds { sides })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Bounds::new(pairs.iter().map(|&(lo, hi)| Interval::new(lo, hi)).collect())
    }

    /// `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Bounds::new(vec![Interval::new(lo, hi); dim])
    }

    pub fn dim(&self) -> usize {
        self.sides.len()
    }

    pub fn volume(&self) -> f64 {
        self.sides.iter().map(Interval::width).product()
    }

    pub fn as_region(&self) -> Region {
        Region { sides: self.sides.clone() }
    }

    /// Smallest box covering every row of `points`.
    pub fn enclosing(points: &[Vec<f64>]) -> Result<Self> {
        let first = points.first().ok_or(Error::EmptyDataset)?;
        let mut sides: Vec<Interval> = first.iter().map(|&x| Interval::new(x, x)).collect();
        for p in points {
            check_dim(sides.len(), p.len())?;
            for (s, &x) in sides.iter_mut().zip(p) {
                s.lo = s.lo.min(x);
                s.hi = s.hi.max(x);
            }
        }
        // a constant covariate still needs a non-degenerate side
        for s in &mut sides {
            if s.hi <= s.lo {
                s.lo -= 0.5;
                s.hi += 0.5;
            }
        }
        Bounds::new(sides)
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Experimental data: covariates, binary treatment and outcome per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    covariates: Vec<Vec<f64>>,
    treatment: Vec<bool>,
    outcome: Vec<f64>,
    propensity: f64,
}

impl Dataset {
    pub fn new(
        covariates: Vec<Vec<f64>>,
        treatment: Vec<bool>,
        outcome: Vec<f64>,
        propensity: f64,
    ) -> Result<Self> {
        if !(propensity > 0.0 && propensity < 1.0) {
            return Err(Error::InvalidConfig(format!("propensity {propensity} must lie in (0, 1)")));
        }
        let n = covariates.len();
        check_dim(n, treatment.len())?;
        check_dim(n, outcome.len())?;
        if let Some(first) = covariates.first() {
            let d = first.len();
            for row in &covariates {
                check_dim(d, row.len())?;
            }
        }
        Ok(Dataset { covariates, treatment, outcome, propensity })
    }

    pub fn len(&self) -> usize {
        self.covariates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covariates.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.covariates.first().map_or(0, Vec::len)
    }

    pub fn covariates(&self) -> &[Vec<f64>] {
        &self.covariates
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn propensity(&self) -> f64 {
        self.propensity
    }

    /// Rows selected by index, in the given order (indices may repeat).
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            covariates: idx.iter().map(|&i| self.covariates[i].clone()).collect(),
            treatment: idx.iter().map(|&i| self.treatment[i]).collect(),
            outcome: idx.iter().map(|&i| self.outcome[i]).collect(),
            propensity: self.propensity,
        }
    }

    /// Same rows with covariates replaced.
    pub fn with_covariates(&self, covariates: Vec<Vec<f64>>) -> Result<Dataset> {
        Dataset::new(covariates, self.treatment.clone(), self.outcome.clone(), self.propensity)
    }
}

/// Units with known true treatment effects (synthetic ground truth).
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub covariates: Vec<Vec<f64>>,
    pub true_effect: Vec<f64>,
}

impl Population {
    pub fn len(&self) -> usize {
        self.covariates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covariates.is_empty()
    }
}
