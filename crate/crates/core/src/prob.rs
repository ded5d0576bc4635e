//! Normal-distribution primitives for access and egress walking times.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean and variance (seconds, seconds²) of a fitted normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalParams {
    pub mu: f64,
    pub sigma2: f64,
    pub count: usize,
}

impl NormalParams {
    pub fn new(mu: f64, sigma2: f64) -> Self {
        Self { mu, sigma2, count: 0 }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    /// Sample mean and unbiased variance, floored. `None` for no samples.
    pub fn fit(samples: &[f64], sigma2_floor: f64) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        // Welford
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            let d = x - mean;
            mean += d / (i + 1) as f64;
            m2 += d * (x - mean);
        }
        let n = samples.len();
        let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
        Some(Self {
            mu: mean,
            sigma2: var.max(sigma2_floor),
            count: n,
        })
    }

    /// Weighted maximum-likelihood fit: `Σw·x / Σw` and `Σw·(x-μ)² / Σw`.
    pub fn fit_weighted(samples: &[(f64, f64)], sigma2_floor: f64) -> Option<Self> {
        let total: f64 = samples.iter().map(|&(_, w)| w).sum();
        if samples.is_empty() || !(total > 0.0) {
            return None;
        }
        let mu = samples.iter().map(|&(x, w)| w * x).sum::<f64>() / total;
        let var = samples.iter().map(|&(x, w)| w * (x - mu) * (x - mu)).sum::<f64>() / total;
        Some(Self {
            mu,
            sigma2: var.max(sigma2_floor),
            count: samples.len(),
        })
    }

    pub fn pdf(&self, x: f64) -> f64 {
        normal_pdf(x, self)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        ln_normal_pdf(x, self)
    }
}

pub fn normal_pdf(x: f64, p: &NormalParams) -> f64 {
    let d = x - p.mu;
    (-d * d / (2.0 * p.sigma2)).exp() / (2.0 * PI * p.sigma2).sqrt()
}

pub fn ln_normal_pdf(x: f64, p: &NormalParams) -> f64 {
    let d = x - p.mu;
    -d * d / (2.0 * p.sigma2) - 0.5 * (2.0 * PI * p.sigma2).ln()
}

/// Closed-form `KL(p ‖ q)` in nats for two univariate normals.
pub fn kl_normal(p: &NormalParams, q: &NormalParams) -> f64 {
    let d = p.mu - q.mu;
    let kl = 0.5 * (q.sigma2 / p.sigma2).ln() + (p.sigma2 + d * d) / (2.0 * q.sigma2) - 0.5;
    // rounding can leave -1e-17 for identical inputs
    kl.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One model per directed OD route.
    #[default]
    Od,
    /// Access keyed by entry station, egress by exit station.
    Station,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbConfig {
    pub grouping: Grouping,
    pub sigma2_floor: f64,
    pub min_samples: usize,
}

impl Default for ProbConfig {
    fn default() -> Self {
        Self {
            grouping: Grouping::Od,
            sigma2_floor: 1.0,
            min_samples: 5,
        }
    }
}

impl ProbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2_floor > 0.0) || !self.sigma2_floor.is_finite() {
            return Err(Error::Config("prob.sigma2_floor must be positive".into()));
        }
        if self.min_samples == 0 {
            return Err(Error::Config("prob.min_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Normal parameters per fitting group, with a global fit as fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedNormal {
    pub global: NormalParams,
    pub groups: BTreeMap<String, NormalParams>,
}

impl GroupedNormal {
    pub fn uniform(params: NormalParams) -> Self {
        Self {
            global: params,
            groups: BTreeMap::new(),
        }
    }

    /// Fits every group with at least `min_samples`; the rest use the global fit.
    pub fn fit<'a>(samples: impl IntoIterator<Item = (&'a str, f64)>, cfg: &ProbConfig) -> Result<Self> {
        let mut all = Vec::new();
        let mut by_group: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (g, x) in samples {
            all.push(x);
            by_group.entry(g).or_default().push(x);
        }
        let global = NormalParams::fit(&all, cfg.sigma2_floor).ok_or(Error::NoObservableData)?;
        let groups = by_group
            .into_iter()
            .filter(|(_, xs)| xs.len() >= cfg.min_samples)
            .filter_map(|(g, xs)| NormalParams::fit(&xs, cfg.sigma2_floor).map(|p| (g.to_string(), p)))
            .collect();
        Ok(Self { global, groups })
    }

    pub fn params(&self, group: &str) -> &NormalParams {
        self.groups.get(group).unwrap_or(&self.global)
    }

    pub fn density(&self, group: &str, x: f64) -> f64 {
        self.params(group).pdf(x)
    }
}

/// Prior over gate-to-boarding time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessModel(pub GroupedNormal);

/// Alighting-to-gate time; its parameters are what EM refines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgressModel(pub GroupedNormal);

impl AccessModel {
    pub fn params(&self, group: &str) -> &NormalParams {
        self.0.params(group)
    }
}

impl EgressModel {
    pub fn params(&self, group: &str) -> &NormalParams {
        self.0.params(group)
    }
}

/// Exact access/egress times of one observable record.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedTrip {
    pub access_group: String,
    pub egress_group: String,
    pub access: f64,
    pub egress: f64,
}

pub fn fit_access(observed: &[ObservedTrip], cfg: &ProbConfig) -> Result<AccessModel> {
    GroupedNormal::fit(observed.iter().map(|o| (o.access_group.as_str(), o.access)), cfg).map(AccessModel)
}

/// Initial egress parameters for EM, from the observable records.
pub fn init_egress(observed: &[ObservedTrip], cfg: &ProbConfig) -> Result<EgressModel> {
    GroupedNormal::fit(observed.iter().map(|o| (o.egress_group.as_str(), o.egress)), cfg).map(EgressModel)
}
