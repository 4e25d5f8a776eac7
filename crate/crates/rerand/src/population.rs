//! A study population: covariates plus optional tier structure, stratum
//! labels, and potential outcomes. Serialized as a covariate CSV next to a
//! JSON sidecar carrying everything the CSV cannot.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::stats::{CovariateMatrix, TierPartition};

pub const POPULATION_SCHEMA: &str = "rerand/population/v1";

/// Per-unit stratum membership for populations with discrete covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumInfo {
    unit_stratum: Vec<usize>,
    n_strata: usize,
    /// Raw values of the discrete covariate(s), one row per unit, when the
    /// population was generated rather than loaded bare.
    special_values: Option<Matrix>,
}

impl StratumInfo {
    pub fn new(unit_stratum: Vec<usize>, n_strata: usize) -> Result<Self> {
        if n_strata == 0 {
            return Err(Error::InvalidData("need at least one stratum".into()));
        }
        if let Some(&bad) = unit_stratum.iter().find(|&&j| j >= n_strata) {
            return Err(Error::InvalidData(format!(
                "stratum id {bad} out of range for {n_strata} strata"
            )));
        }
        Ok(StratumInfo {
            unit_stratum,
            n_strata,
            special_values: None,
        })
    }

    pub fn with_special_values(mut self, values: Matrix) -> Result<Self> {
        if values.rows() != self.unit_stratum.len() {
            return Err(Error::InvalidData(
                "special covariate rows do not match unit count".into(),
            ));
        }
        self.special_values = Some(values);
        Ok(self)
    }

    pub fn n_strata(&self) -> usize {
        self.n_strata
    }

    pub fn unit_stratum(&self) -> &[usize] {
        &self.unit_stratum
    }

    pub fn special_values(&self) -> Option<&Matrix> {
        self.special_values.as_ref()
    }

    /// Unit indices per stratum, in row order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_strata];
        for (i, &j) in self.unit_stratum.iter().enumerate() {
            out[j].push(i);
        }
        out
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_strata];
        for &j in &self.unit_stratum {
            out[j] += 1;
        }
        out
    }

    /// Strata that ended up with no units. Legal in generated samples, so
    /// this is a flag for callers rather than an error.
    pub fn empty_strata(&self) -> Vec<usize> {
        self.counts()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(j, _)| j)
            .collect()
    }
}

/// Both potential outcomes for every unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialOutcomes {
    pub control: Vec<f64>,
    pub treated: Vec<f64>,
}

impl PotentialOutcomes {
    pub fn new(control: Vec<f64>, treated: Vec<f64>) -> Result<Self> {
        if control.len() != treated.len() {
            return Err(Error::InvalidData(
                "control and treated outcome lengths differ".into(),
            ));
        }
        if control
            .iter()
            .chain(&treated)
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidData("non-finite outcome".into()));
        }
        Ok(PotentialOutcomes { control, treated })
    }

    pub fn len(&self) -> usize {
        self.control.len()
    }

    pub fn is_empty(&self) -> bool {
        self.control.is_empty()
    }

    /// Average treatment effect over the population.
    pub fn tau(&self) -> f64 {
        let n = self.len() as f64;
        self.treated
            .iter()
            .zip(&self.control)
            .map(|(t, c)| t - c)
            .sum::<f64>()
            / n
    }

    /// Propensity-centered outcome (1-p) Y(1) + p Y(0). The difference in
    /// its group means equals the estimation error of the mean-difference
    /// effect estimate.
    pub fn centered(&self, p: f64) -> Vec<f64> {
        self.treated
            .iter()
            .zip(&self.control)
            .map(|(t, c)| (1.0 - p) * t + p * c)
            .collect()
    }
}

/// Covariates plus the structure criteria may refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariatePopulation {
    covariates: CovariateMatrix,
    tiers: TierPartition,
    strata: Option<StratumInfo>,
    outcomes: Option<PotentialOutcomes>,
}

impl CovariatePopulation {
    pub fn new(
        covariates: CovariateMatrix,
        tiers: TierPartition,
        strata: Option<StratumInfo>,
        outcomes: Option<PotentialOutcomes>,
    ) -> Result<Self> {
        tiers.check_covers(covariates.n_covariates())?;
        if let Some(s) = &strata {
            if s.unit_stratum().len() != covariates.n_units() {
                return Err(Error::InvalidData(
                    "stratum labels do not match unit count".into(),
                ));
            }
        }
        if let Some(o) = &outcomes {
            if o.len() != covariates.n_units() {
                return Err(Error::InvalidData(
                    "outcomes do not match unit count".into(),
                ));
            }
        }
        Ok(CovariatePopulation {
            covariates,
            tiers,
            strata,
            outcomes,
        })
    }

    pub fn covariates(&self) -> &CovariateMatrix {
        &self.covariates
    }

    pub fn tiers(&self) -> &TierPartition {
        &self.tiers
    }

    pub fn strata(&self) -> Option<&StratumInfo> {
        self.strata.as_ref()
    }

    pub fn outcomes(&self) -> Option<&PotentialOutcomes> {
        self.outcomes.as_ref()
    }

    pub fn n_units(&self) -> usize {
        self.covariates.n_units()
    }

    pub fn with_outcomes(mut self, outcomes: PotentialOutcomes) -> Result<Self> {
        if outcomes.len() != self.n_units() {
            return Err(Error::InvalidData(
                "outcomes do not match unit count".into(),
            ));
        }
        self.outcomes = Some(outcomes);
        Ok(self)
    }

    /// Writes `<path>` as a covariate CSV and `<sidecar>` as JSON metadata.
    pub fn save(&self, csv_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<()> {
        self.covariates.write_csv(csv_path)?;
        let sidecar = Sidecar {
            schema: POPULATION_SCHEMA.to_string(),
            tiers: self.tiers.sizes().to_vec(),
            strata: self.strata.as_ref().map(|s| SidecarStrata {
                n_strata: s.n_strata(),
                unit_stratum: s.unit_stratum().to_vec(),
                special_values: s.special_values().map(|m| m.clone().into()),
            }),
            outcomes: self.outcomes.clone(),
        };
        let file = std::fs::File::create(sidecar_path)?;
        serde_json::to_writer_pretty(file, &sidecar)?;
        Ok(())
    }

    /// Loads a covariate CSV, with an optional JSON sidecar for structure.
    pub fn load(
        csv_path: impl AsRef<Path>,
        sidecar_path: Option<&Path>,
    ) -> Result<CovariatePopulation> {
        let covariates = CovariateMatrix::read_csv(csv_path)?;
        let Some(sidecar_path) = sidecar_path else {
            return Ok(CovariatePopulation::from(covariates));
        };
        let file = std::fs::File::open(sidecar_path)?;
        let sidecar: Sidecar = serde_json::from_reader(file)?;
        if sidecar.schema != POPULATION_SCHEMA {
            return Err(Error::InvalidData(format!(
                "unsupported sidecar schema {:?}, expected {POPULATION_SCHEMA:?}",
                sidecar.schema
            )));
        }
        let tiers = TierPartition::new(sidecar.tiers)?;
        let strata = match sidecar.strata {
            None => None,
            Some(s) => {
                let mut info = StratumInfo::new(s.unit_stratum, s.n_strata)?;
                if let Some(values) = s.special_values {
                    info = info.with_special_values(Matrix::from_rows(values)?)?;
                }
                Some(info)
            }
        };
        CovariatePopulation::new(covariates, tiers, strata, sidecar.outcomes)
    }
}

impl From<CovariateMatrix> for CovariatePopulation {
    fn from(covariates: CovariateMatrix) -> Self {
        let tiers = TierPartition::single(covariates.n_covariates());
        CovariatePopulation {
            covariates,
            tiers,
            strata: None,
            outcomes: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    schema: String,
    tiers: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    strata: Option<SidecarStrata>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    outcomes: Option<PotentialOutcomes>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarStrata {
    n_strata: usize,
    unit_stratum: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    special_values: Option<Vec<Vec<f64>>>,
}
