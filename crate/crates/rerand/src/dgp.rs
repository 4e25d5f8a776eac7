//! Synthetic population generators: ellipsoidally symmetric covariates,
//! optionally conditional on a discrete covariate, plus linear potential
//! outcomes.
//!
//! Each unit draws from its own substream, indexed by row, so samples are
//! reproducible and extending n leaves earlier rows unchanged. Within a row
//! the stream order is fixed: level pick (when there are several), then one
//! standard normal per continuous covariate, then the radial divisor for
//! heavy-tailed families.

use rand::Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::population::{CovariatePopulation, PotentialOutcomes, StratumInfo};
use crate::rng::{substream, Domain};
use crate::stats::{CovariateMatrix, TierPartition};

pub const DGP_SCHEMA: &str = "rerand/dgp/v1";

/// Radial law of the elliptical distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RadialFamily {
    #[default]
    Normal,
    /// Multivariate t with scale matrix sigma; covariance is
    /// df/(df-2) * sigma, hence df > 2.
    StudentT { df: f64 },
}

impl RadialFamily {
    fn validate(&self) -> Result<()> {
        if let RadialFamily::StudentT { df } = self {
            if !(df.is_finite() && *df > 2.0) {
                return Err(Error::InvalidData(format!(
                    "student t needs df > 2, got {df}"
                )));
            }
        }
        Ok(())
    }

    /// Divides a standard normal vector to produce the radial law. Consumes
    /// stream randomness only for heavy-tailed families.
    fn radial_divisor(&self, rng: &mut impl Rng) -> f64 {
        match self {
            RadialFamily::Normal => 1.0,
            RadialFamily::StudentT { df } => {
                let chi2 = Gamma::new(df / 2.0, 2.0).expect("validated df");
                (rng.sample::<f64, _>(chi2) / df).sqrt()
            }
        }
    }
}

/// Elliptical population: mu + radial * N(0, sigma).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipsoidalSpec {
    pub mu: Vec<f64>,
    pub sigma: Matrix,
    #[serde(default)]
    pub family: RadialFamily,
}

impl EllipsoidalSpec {
    fn validate(&self) -> Result<()> {
        if self.sigma.rows() != self.mu.len() || self.sigma.cols() != self.mu.len() {
            return Err(Error::InvalidData(
                "sigma dimensions do not match mu".into(),
            ));
        }
        self.family.validate()
    }
}

/// One level of the discrete covariate: its code, marginal probability, and
/// the conditional mean of the continuous covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionalLevel {
    pub probability: f64,
    /// Raw value(s) the discrete covariate takes at this level.
    pub value: Vec<f64>,
    pub mu: Vec<f64>,
    #[serde(default)]
    pub family: RadialFamily,
}

/// Mixture of elliptical conditionals sharing one scale matrix, indexed by
/// a discrete covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionalEllipsoidalSpec {
    pub levels: Vec<ConditionalLevel>,
    pub sigma: Matrix,
}

impl ConditionalEllipsoidalSpec {
    fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidData("need at least one level".into()));
        }
        let k_r = self.sigma.rows();
        if self.sigma.cols() != k_r {
            return Err(Error::InvalidData("sigma must be square".into()));
        }
        let k_s = self.levels[0].value.len();
        if k_s == 0 {
            return Err(Error::InvalidData(
                "levels need at least one discrete value".into(),
            ));
        }
        let mut total = 0.0;
        for level in &self.levels {
            if !(level.probability.is_finite() && level.probability > 0.0) {
                return Err(Error::InvalidProbability {
                    value: level.probability,
                });
            }
            total += level.probability;
            if level.mu.len() != k_r {
                return Err(Error::InvalidData(
                    "level mean length does not match sigma".into(),
                ));
            }
            if level.value.len() != k_s {
                return Err(Error::InvalidData(
                    "levels disagree on discrete covariate width".into(),
                ));
            }
            level.family.validate()?;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidData(format!(
                "level probabilities sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Linear potential outcomes with independent normal noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialOutcomeSpec {
    pub treated_intercept: f64,
    pub control_intercept: f64,
    pub treated_slopes: Vec<f64>,
    pub control_slopes: Vec<f64>,
    pub noise_sd: f64,
}

impl PotentialOutcomeSpec {
    fn validate(&self, k: usize) -> Result<()> {
        if self.treated_slopes.len() != k || self.control_slopes.len() != k {
            return Err(Error::InvalidData(format!(
                "outcome slopes must have length {k}"
            )));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::InvalidData(format!(
                "noise_sd must be nonnegative, got {}",
                self.noise_sd
            )));
        }
        Ok(())
    }
}

fn standard_normal_row(rng: &mut impl Rng, k: usize, out: &mut [f64]) {
    for z in out.iter_mut().take(k) {
        *z = rng.sample(StandardNormal);
    }
}

/// x_i = mu + z_i G' / divisor, with G the lower Cholesky factor of sigma.
pub fn sample_ellipsoidal(spec: &EllipsoidalSpec, n: usize, seed: u64) -> Result<CovariateMatrix> {
    spec.validate()?;
    if n < 2 {
        return Err(Error::InvalidData("need at least 2 units".into()));
    }
    let g = spec.sigma.cholesky()?;
    let k = spec.mu.len();
    let mut values = Matrix::zeros(n, k);
    let mut z = vec![0.0; k];
    for i in 0..n {
        let mut rng = substream(seed, Domain::PopulationRow, i as u64);
        standard_normal_row(&mut rng, k, &mut z);
        let div = spec.family.radial_divisor(&mut rng);
        write_elliptical_row(values.row_mut(i), &spec.mu, &z, g.lower(), div);
    }
    CovariateMatrix::with_default_labels(values)
}

fn write_elliptical_row(row: &mut [f64], mu: &[f64], z: &[f64], g: &Matrix, divisor: f64) {
    for (j, slot) in row.iter_mut().enumerate() {
        let mut v = 0.0;
        // Lower-triangular product: row j of G dotted with z[..=j].
        for (l, zl) in z.iter().enumerate().take(j + 1) {
            v += g.get(j, l) * zl;
        }
        *slot = mu[j] + v / divisor;
    }
}

/// Draws the discrete level per unit, then the continuous covariates from
/// that level's conditional. With a single level no level randomness is
/// consumed, so the draw matches `sample_ellipsoidal` stream for stream.
pub fn sample_conditional_ellipsoidal(
    spec: &ConditionalEllipsoidalSpec,
    n: usize,
    seed: u64,
) -> Result<CovariatePopulation> {
    spec.validate()?;
    let j_levels = spec.levels.len();
    if n < 2 * j_levels.max(1) {
        return Err(Error::InvalidData(format!(
            "need at least {} units for {j_levels} levels",
            2 * j_levels
        )));
    }
    let g = spec.sigma.cholesky()?;
    let k_r = spec.sigma.rows();
    let k_s = spec.levels[0].value.len();
    let mut values = Matrix::zeros(n, k_r);
    let mut special = Matrix::zeros(n, k_s);
    let mut unit_level = vec![0usize; n];
    let mut z = vec![0.0; k_r];
    for i in 0..n {
        let mut rng = substream(seed, Domain::PopulationRow, i as u64);
        let level_idx = if j_levels == 1 {
            0
        } else {
            let u: f64 = rng.random();
            pick_level(&spec.levels, u)
        };
        let level = &spec.levels[level_idx];
        standard_normal_row(&mut rng, k_r, &mut z);
        let div = level.family.radial_divisor(&mut rng);
        write_elliptical_row(values.row_mut(i), &level.mu, &z, g.lower(), div);
        for (s, v) in special.row_mut(i).iter_mut().zip(&level.value) {
            *s = *v;
        }
        unit_level[i] = level_idx;
    }
    let covariates = CovariateMatrix::with_default_labels(values)?;
    let strata = StratumInfo::new(unit_level, j_levels)?.with_special_values(special)?;
    CovariatePopulation::new(
        covariates,
        TierPartition::single(k_r),
        Some(strata),
        None,
    )
}

fn pick_level(levels: &[ConditionalLevel], u: f64) -> usize {
    let mut cum = 0.0;
    for (idx, level) in levels.iter().enumerate() {
        cum += level.probability;
        if u < cum {
            return idx;
        }
    }
    levels.len() - 1
}

/// Attaches both potential outcomes to every unit. Noise draws come from
/// the outcome domain (treated first, then control), independent of the
/// covariate streams.
pub fn attach_outcomes(
    pop: impl Into<CovariatePopulation>,
    spec: &PotentialOutcomeSpec,
    seed: u64,
) -> Result<CovariatePopulation> {
    let pop = pop.into();
    let k = pop.covariates().n_covariates();
    spec.validate(k)?;
    let n = pop.n_units();
    let values = pop.covariates().values();
    let mut treated = Vec::with_capacity(n);
    let mut control = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = substream(seed, Domain::OutcomeNoise, i as u64);
        let e1: f64 = rng.sample(StandardNormal);
        let e0: f64 = rng.sample(StandardNormal);
        let row = values.row(i);
        let dot = |slopes: &[f64]| -> f64 {
            slopes.iter().zip(row).map(|(b, x)| b * x).sum()
        };
        treated.push(spec.treated_intercept + dot(&spec.treated_slopes) + spec.noise_sd * e1);
        control.push(spec.control_intercept + dot(&spec.control_slopes) + spec.noise_sd * e0);
    }
    pop.with_outcomes(PotentialOutcomes::new(control, treated)?)
}

/// Population model for simulation configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PopulationModel {
    Ellipsoidal(EllipsoidalSpec),
    ConditionalEllipsoidal(ConditionalEllipsoidalSpec),
}

/// On-disk simulation config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpFile {
    pub schema: String,
    pub population: PopulationModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcomes: Option<PotentialOutcomeSpec>,
}

impl DgpFile {
    pub fn new(population: PopulationModel, outcomes: Option<PotentialOutcomeSpec>) -> Self {
        DgpFile {
            schema: DGP_SCHEMA.to_string(),
            population,
            outcomes,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<DgpFile> {
        let file = std::fs::File::open(path)?;
        let parsed: DgpFile = serde_json::from_reader(file)?;
        if parsed.schema != DGP_SCHEMA {
            return Err(Error::InvalidData(format!(
                "unsupported dgp schema {:?}, expected {DGP_SCHEMA:?}",
                parsed.schema
            )));
        }
        Ok(parsed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    /// Samples covariates and, when configured, outcomes. Covariate and
    /// outcome noise live in different stream domains of the same seed.
    pub fn sample(&self, n: usize, seed: u64) -> Result<CovariatePopulation> {
        let pop = match &self.population {
            PopulationModel::Ellipsoidal(spec) => {
                CovariatePopulation::from(sample_ellipsoidal(spec, n, seed)?)
            }
            PopulationModel::ConditionalEllipsoidal(spec) => {
                sample_conditional_ellipsoidal(spec, n, seed)?
            }
        };
        match &self.outcomes {
            None => Ok(pop),
            Some(spec) => attach_outcomes(pop, spec, seed),
        }
    }
}
