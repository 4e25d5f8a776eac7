//! Balance criteria: declarative acceptance rules composed of score
//! thresholds, box constraints, exact stratification, and stochastic
//! attenuation.
//!
//! A criterion maps an assignment to an acceptance probability in [0, 1].
//! Deterministic rules return exactly 0 or 1; `evaluate` never flips coins,
//! so callers can Rao-Blackwellize over the randomness themselves.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{CholeskyFactor, Matrix};
use crate::population::{CovariatePopulation, StratumInfo};
use crate::stats::{
    cholesky_or_singular, column_block_of, covariance_of, group_mean_diff, mahalanobis_quad,
    sample_covariance, CovariateMatrix, TierPartition,
};

pub const CRITERION_SCHEMA: &str = "rerand/criterion/v1";

/// A treatment assignment. Both arms are always nonempty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    w: Vec<bool>,
    n_treated: usize,
}

impl Assignment {
    pub fn new(w: Vec<bool>) -> Result<Self> {
        let n_treated = w.iter().filter(|&&b| b).count();
        if n_treated == 0 || n_treated == w.len() {
            return Err(Error::InvalidData(
                "assignment must leave both arms nonempty".into(),
            ));
        }
        Ok(Assignment { w, n_treated })
    }

    pub fn from_treated_indices(n: usize, treated: &[usize]) -> Result<Self> {
        let mut w = vec![false; n];
        for &i in treated {
            if i >= n {
                return Err(Error::InvalidData(format!("unit index {i} out of range")));
            }
            if std::mem::replace(&mut w[i], true) {
                return Err(Error::InvalidData(format!("unit {i} listed twice")));
            }
        }
        Assignment::new(w)
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn n_treated(&self) -> usize {
        self.n_treated
    }

    pub fn n_control(&self) -> usize {
        self.w.len() - self.n_treated
    }

    pub fn is_treated(&self, unit: usize) -> bool {
        self.w[unit]
    }

    pub fn as_bools(&self) -> &[bool] {
        &self.w
    }

    pub fn propensity(&self) -> f64 {
        self.n_treated as f64 / self.w.len() as f64
    }

    pub fn treated_indices(&self) -> Vec<usize> {
        (0..self.w.len()).filter(|&i| self.w[i]).collect()
    }

    /// 0/1 indicator per unit, for reports.
    pub fn indicator(&self) -> Vec<u8> {
        self.w.iter().map(|&b| b as u8).collect()
    }

    /// Swaps arm labels.
    pub fn complement(&self) -> Assignment {
        Assignment {
            w: self.w.iter().map(|&b| !b).collect(),
            n_treated: self.n_control(),
        }
    }

    pub fn stratum_treated_counts(&self, strata: &StratumInfo) -> Vec<usize> {
        let mut counts = vec![0usize; strata.n_strata()];
        for (i, &j) in strata.unit_stratum().iter().enumerate() {
            if self.w[i] {
                counts[j] += 1;
            }
        }
        counts
    }
}

/// Labeled balance scores for one assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

/// Which score vector a weighted-sum rule consumes when evaluated on data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFamily {
    Mahalanobis,
    #[default]
    Tiers,
    Strata,
    PerCovariate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MahalanobisThreshold {
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierScoreThreshold {
    /// 1-based tier index.
    pub tier: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StratumScoreThreshold {
    /// 1-based stratum index.
    pub stratum: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedSumThreshold {
    #[serde(default)]
    pub scores: ScoreFamily,
    /// Written as decimal strings so criterion files carry exact values.
    #[serde(with = "decimal_weights")]
    pub weights: Vec<f64>,
    pub alpha: f64,
    /// Acceptance probability on the boundary sum == alpha.
    #[serde(default = "one")]
    pub tie_prob: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerCovariateBounds {
    /// One threshold per covariate; accept iff every score is at or below
    /// its bound.
    pub bounds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stratification {
    /// Exact treated count required in each stratum.
    pub treated_per_stratum: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intersection {
    pub children: Vec<CriterionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stochastic {
    pub p: f64,
}

/// A composable acceptance rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CriterionSpec {
    MahalanobisThreshold(MahalanobisThreshold),
    TierScoreThreshold(TierScoreThreshold),
    StratumScoreThreshold(StratumScoreThreshold),
    WeightedSumThreshold(WeightedSumThreshold),
    PerCovariateBounds(PerCovariateBounds),
    Stratification(Stratification),
    Intersection(Intersection),
    Stochastic(Stochastic),
}

mod decimal_weights {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| x.to_string()))
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?
            .into_iter()
            .map(|r| match r {
                Repr::Num(x) => Ok(x),
                Repr::Str(s) => s
                    .trim()
                    .parse()
                    .map_err(|_| D::Error::custom(format!("bad weight {s:?}"))),
            })
            .collect()
    }
}

impl CriterionSpec {
    pub fn mahalanobis(alpha: f64) -> Self {
        CriterionSpec::MahalanobisThreshold(MahalanobisThreshold { alpha })
    }

    pub fn tier(tier: usize, alpha: f64) -> Self {
        CriterionSpec::TierScoreThreshold(TierScoreThreshold { tier, alpha })
    }

    pub fn stratum(stratum: usize, alpha: f64) -> Self {
        CriterionSpec::StratumScoreThreshold(StratumScoreThreshold { stratum, alpha })
    }

    pub fn weighted_sum(scores: ScoreFamily, weights: Vec<f64>, alpha: f64) -> Self {
        CriterionSpec::WeightedSumThreshold(WeightedSumThreshold {
            scores,
            weights,
            alpha,
            tie_prob: 1.0,
        })
    }

    pub fn intersection(children: Vec<CriterionSpec>) -> Self {
        CriterionSpec::Intersection(Intersection { children })
    }

    pub fn stochastic(p: f64) -> Self {
        CriterionSpec::Stochastic(Stochastic { p })
    }

    pub fn validate(&self) -> Result<()> {
        fn check_threshold(alpha: f64) -> Result<()> {
            if !alpha.is_finite() || alpha < 0.0 {
                return Err(Error::InvalidThreshold { value: alpha });
            }
            Ok(())
        }
        match self {
            CriterionSpec::MahalanobisThreshold(c) => check_threshold(c.alpha),
            CriterionSpec::TierScoreThreshold(c) => {
                if c.tier == 0 {
                    return Err(Error::InvalidCriterion("tier indices are 1-based".into()));
                }
                check_threshold(c.alpha)
            }
            CriterionSpec::StratumScoreThreshold(c) => {
                if c.stratum == 0 {
                    return Err(Error::InvalidCriterion(
                        "stratum indices are 1-based".into(),
                    ));
                }
                check_threshold(c.alpha)
            }
            CriterionSpec::WeightedSumThreshold(c) => {
                if c.weights.is_empty() {
                    return Err(Error::InvalidCriterion("weights must be nonempty".into()));
                }
                for &w in &c.weights {
                    if !w.is_finite() || w < 0.0 {
                        return Err(Error::InvalidCriterion(format!(
                            "weights must be finite and nonnegative, got {w}"
                        )));
                    }
                }
                if c.weights.iter().all(|&w| w == 0.0) {
                    return Err(Error::DegenerateWeights);
                }
                if !(0.0..=1.0).contains(&c.tie_prob) {
                    return Err(Error::InvalidProbability { value: c.tie_prob });
                }
                check_threshold(c.alpha)
            }
            CriterionSpec::PerCovariateBounds(c) => {
                if c.bounds.is_empty() {
                    return Err(Error::InvalidCriterion("bounds must be nonempty".into()));
                }
                c.bounds.iter().try_for_each(|&b| check_threshold(b))
            }
            CriterionSpec::Stratification(c) => {
                if c.treated_per_stratum.is_empty() {
                    return Err(Error::InvalidCriterion(
                        "stratification needs at least one stratum".into(),
                    ));
                }
                Ok(())
            }
            CriterionSpec::Intersection(c) => {
                if c.children.is_empty() {
                    return Err(Error::InvalidCriterion(
                        "intersection needs at least one child".into(),
                    ));
                }
                c.children.iter().try_for_each(CriterionSpec::validate)
            }
            CriterionSpec::Stochastic(c) => {
                if !(c.p > 0.0 && c.p <= 1.0) {
                    return Err(Error::InvalidProbability { value: c.p });
                }
                Ok(())
            }
        }
    }

    /// Weighted-sum rules with strictly positive weights; these never
    /// discard an assignment another acceptable assignment beats on every
    /// score.
    pub fn is_admissible_form(&self) -> bool {
        matches!(
            self,
            CriterionSpec::WeightedSumThreshold(c) if c.weights.iter().all(|&w| w > 0.0)
        )
    }
}

/// On-disk wrapper for criterion JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriterionFile {
    pub schema: String,
    pub criterion: CriterionSpec,
}

impl CriterionFile {
    pub fn new(criterion: CriterionSpec) -> Self {
        CriterionFile {
            schema: CRITERION_SCHEMA.to_string(),
            criterion,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CriterionSpec> {
        let file = std::fs::File::open(path)?;
        let parsed: CriterionFile = serde_json::from_reader(file)?;
        if parsed.schema != CRITERION_SCHEMA {
            return Err(Error::InvalidData(format!(
                "unsupported criterion schema {:?}, expected {CRITERION_SCHEMA:?}",
                parsed.schema
            )));
        }
        parsed.criterion.validate()?;
        Ok(parsed.criterion)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }
}

/// Tier balance scores on block-orthogonalized covariates. Scores of
/// distinct tiers are asymptotically independent chi-squares.
pub fn tier_scores(
    x: &CovariateMatrix,
    tiers: &TierPartition,
    w: &Assignment,
) -> Result<ScoreVector> {
    let caches = TierCaches::build(x, tiers)?;
    Ok(ScoreVector {
        labels: tier_labels(tiers.n_tiers()),
        values: caches.values(w),
    })
}

/// Per-stratum Mahalanobis scores on the remaining covariates, scaled by
/// realized within-stratum group sizes.
pub fn stratum_scores(
    x_r: &CovariateMatrix,
    strata: &StratumInfo,
    w: &Assignment,
) -> Result<ScoreVector> {
    let caches = StratumCaches::build(x_r, strata)?;
    Ok(ScoreVector {
        labels: stratum_labels(strata.n_strata()),
        values: caches.values(x_r.values(), w)?,
    })
}

/// One-dimensional score per covariate: n p(1-p) d^2 / S_ll.
pub fn per_covariate_bounds_scores(x: &CovariateMatrix, w: &Assignment) -> Result<ScoreVector> {
    let variances = column_variances(x)?;
    Ok(ScoreVector {
        labels: x.column_labels().to_vec(),
        values: per_covariate_values(x.values(), &variances, w),
    })
}

fn tier_labels(t: usize) -> Vec<String> {
    (1..=t).map(|i| format!("tier{i}")).collect()
}

fn stratum_labels(j: usize) -> Vec<String> {
    (1..=j).map(|i| format!("stratum{i}")).collect()
}

fn column_variances(x: &CovariateMatrix) -> Result<Vec<f64>> {
    let s = sample_covariance(x);
    (0..x.n_covariates())
        .map(|l| {
            let v = s.get(l, l);
            if v <= 0.0 {
                Err(Error::ZeroVariance { column: l + 1 })
            } else {
                Ok(v)
            }
        })
        .collect()
}

fn per_covariate_values(values: &Matrix, variances: &[f64], w: &Assignment) -> Vec<f64> {
    let d = group_mean_diff(values, w).diff;
    let n = w.len() as f64;
    let scale = w.n_treated() as f64 * w.n_control() as f64 / n;
    d.iter()
        .zip(variances)
        .map(|(di, v)| scale * di * di / v)
        .collect()
}

struct TierCaches {
    blocks: Vec<Matrix>,
    chols: Vec<CholeskyFactor>,
}

impl TierCaches {
    fn build(x: &CovariateMatrix, tiers: &TierPartition) -> Result<Self> {
        let (residuals, _) = crate::stats::block_orthogonalize(x, tiers)?;
        let mut blocks = Vec::with_capacity(tiers.n_tiers());
        let mut chols = Vec::with_capacity(tiers.n_tiers());
        for t in 0..tiers.n_tiers() {
            let range = tiers.range(t);
            let block = column_block_of(&residuals, range.start, range.len());
            chols.push(cholesky_or_singular(&covariance_of(&block))?);
            blocks.push(block);
        }
        Ok(TierCaches { blocks, chols })
    }

    fn values(&self, w: &Assignment) -> Vec<f64> {
        self.blocks
            .iter()
            .zip(&self.chols)
            .map(|(block, chol)| mahalanobis_quad(block, w, chol))
            .collect()
    }
}

struct StratumCaches {
    members: Vec<Vec<usize>>,
    chols: Vec<CholeskyFactor>,
}

impl StratumCaches {
    fn build(x_r: &CovariateMatrix, strata: &StratumInfo) -> Result<Self> {
        if strata.unit_stratum().len() != x_r.n_units() {
            return Err(Error::InvalidData(
                "stratum labels do not match unit count".into(),
            ));
        }
        let members = strata.members();
        let mut chols = Vec::with_capacity(members.len());
        for (j, units) in members.iter().enumerate() {
            if units.len() < 4 {
                // Fewer than 2 per arm is unavoidable below 4 units.
                return Err(Error::InsufficientStratum { stratum: j + 1 });
            }
            let rows: Vec<Vec<f64>> = units
                .iter()
                .map(|&i| x_r.values().row(i).to_vec())
                .collect();
            let block = Matrix::from_rows(rows)?;
            chols.push(cholesky_or_singular(&covariance_of(&block))?);
        }
        Ok(StratumCaches { members, chols })
    }

    fn values(&self, values: &Matrix, w: &Assignment) -> Result<Vec<f64>> {
        let k = values.cols();
        let mut out = Vec::with_capacity(self.members.len());
        for (j, (units, chol)) in self.members.iter().zip(&self.chols).enumerate() {
            let mut treated = vec![0.0; k];
            let mut control = vec![0.0; k];
            let mut n1 = 0usize;
            for &i in units {
                let target = if w.is_treated(i) {
                    n1 += 1;
                    &mut treated
                } else {
                    &mut control
                };
                for (acc, v) in target.iter_mut().zip(values.row(i)) {
                    *acc += v;
                }
            }
            let n0 = units.len() - n1;
            if n1 < 2 || n0 < 2 {
                return Err(Error::InsufficientStratum { stratum: j + 1 });
            }
            let d: Vec<f64> = treated
                .iter()
                .zip(&control)
                .map(|(t, c)| t / n1 as f64 - c / n0 as f64)
                .collect();
            // n_j p_j (1-p_j) with realized counts.
            let scale = (n1 * n0) as f64 / units.len() as f64;
            out.push(scale * chol.quad_form_inv(&d));
        }
        Ok(out)
    }
}

#[derive(Default, Clone, Copy)]
struct Needs {
    maha: bool,
    tiers: bool,
    strata: bool,
    percov: bool,
    counts: bool,
}

impl Needs {
    fn of(spec: &CriterionSpec) -> Needs {
        let mut needs = Needs::default();
        needs.collect(spec);
        needs
    }

    fn collect(&mut self, spec: &CriterionSpec) {
        match spec {
            CriterionSpec::MahalanobisThreshold(_) => self.maha = true,
            CriterionSpec::TierScoreThreshold(_) => self.tiers = true,
            CriterionSpec::StratumScoreThreshold(_) => self.strata = true,
            CriterionSpec::WeightedSumThreshold(c) => match c.scores {
                ScoreFamily::Mahalanobis => self.maha = true,
                ScoreFamily::Tiers => self.tiers = true,
                ScoreFamily::Strata => self.strata = true,
                ScoreFamily::PerCovariate => self.percov = true,
            },
            CriterionSpec::PerCovariateBounds(_) => self.percov = true,
            CriterionSpec::Stratification(_) => self.counts = true,
            CriterionSpec::Intersection(c) => c.children.iter().for_each(|ch| self.collect(ch)),
            CriterionSpec::Stochastic(_) => {}
        }
    }
}

#[derive(Default)]
struct EvaluatedScores {
    mahalanobis: Option<f64>,
    tier: Option<Vec<f64>>,
    stratum: Option<Vec<f64>>,
    percov: Option<Vec<f64>>,
    stratum_counts: Option<Vec<usize>>,
}

/// A criterion bound to one population, with covariance factorizations and
/// orthogonalizations done once so per-assignment evaluation is cheap.
pub struct PreparedCriterion<'a> {
    spec: &'a CriterionSpec,
    pop: &'a CovariatePopulation,
    needs: Needs,
    maha_chol: Option<CholeskyFactor>,
    tier_caches: Option<TierCaches>,
    stratum_caches: Option<StratumCaches>,
    variances: Option<Vec<f64>>,
}

impl<'a> PreparedCriterion<'a> {
    pub fn new(spec: &'a CriterionSpec, pop: &'a CovariatePopulation) -> Result<Self> {
        spec.validate()?;
        let needs = Needs::of(spec);
        check_arity(spec, pop)?;
        let maha_chol = if needs.maha {
            Some(cholesky_or_singular(&sample_covariance(pop.covariates()))?)
        } else {
            None
        };
        let tier_caches = if needs.tiers {
            Some(TierCaches::build(pop.covariates(), pop.tiers())?)
        } else {
            None
        };
        let stratum_caches = if needs.strata {
            let strata = pop
                .strata()
                .ok_or_else(|| Error::InvalidCriterion("population has no strata".into()))?;
            Some(StratumCaches::build(pop.covariates(), strata)?)
        } else {
            None
        };
        let variances = if needs.percov {
            Some(column_variances(pop.covariates())?)
        } else {
            None
        };
        Ok(PreparedCriterion {
            spec,
            pop,
            needs,
            maha_chol,
            tier_caches,
            stratum_caches,
            variances,
        })
    }

    pub fn spec(&self) -> &CriterionSpec {
        self.spec
    }

    fn evaluated(&self, w: &Assignment) -> Result<EvaluatedScores> {
        if w.len() != self.pop.n_units() {
            return Err(Error::InvalidData(
                "assignment length does not match number of units".into(),
            ));
        }
        let values = self.pop.covariates().values();
        let mut out = EvaluatedScores::default();
        if let Some(chol) = &self.maha_chol {
            out.mahalanobis = Some(mahalanobis_quad(values, w, chol));
        }
        if let Some(caches) = &self.tier_caches {
            out.tier = Some(caches.values(w));
        }
        if let Some(caches) = &self.stratum_caches {
            out.stratum = Some(caches.values(values, w)?);
        }
        if let Some(variances) = &self.variances {
            out.percov = Some(per_covariate_values(values, variances, w));
        }
        if self.needs.counts {
            let strata = self
                .pop
                .strata()
                .ok_or_else(|| Error::InvalidCriterion("population has no strata".into()))?;
            out.stratum_counts = Some(w.stratum_treated_counts(strata));
        }
        Ok(out)
    }

    /// Acceptance probability of `w` under the bound criterion.
    pub fn acceptance(&self, w: &Assignment) -> Result<f64> {
        let scores = self.evaluated(w)?;
        Ok(eval_node(self.spec, &scores))
    }

    /// Labels of every score family the criterion consumes, in evaluation
    /// order: mahalanobis, tiers, strata, per-covariate.
    pub fn score_labels(&self) -> Vec<String> {
        let mut labels = Vec::new();
        if self.needs.maha {
            labels.push("mahalanobis".to_string());
        }
        if self.needs.tiers {
            labels.extend(tier_labels(self.pop.tiers().n_tiers()));
        }
        if let Some(caches) = &self.stratum_caches {
            labels.extend(stratum_labels(caches.members.len()));
        }
        if self.needs.percov {
            labels.extend(self.pop.covariates().column_labels().iter().cloned());
        }
        labels
    }

    /// All scores the criterion consumes, matching `score_labels`.
    pub fn scores(&self, w: &Assignment) -> Result<ScoreVector> {
        let s = self.evaluated(w)?;
        let mut values = Vec::new();
        if let Some(v) = s.mahalanobis {
            values.push(v);
        }
        if let Some(v) = s.tier {
            values.extend(v);
        }
        if let Some(v) = s.stratum {
            values.extend(v);
        }
        if let Some(v) = s.percov {
            values.extend(v);
        }
        Ok(ScoreVector {
            labels: self.score_labels(),
            values,
        })
    }
}

fn check_arity(spec: &CriterionSpec, pop: &CovariatePopulation) -> Result<()> {
    let k = pop.covariates().n_covariates();
    let n_tiers = pop.tiers().n_tiers();
    let n_strata = pop.strata().map(StratumInfo::n_strata);
    match spec {
        CriterionSpec::MahalanobisThreshold(_) | CriterionSpec::Stochastic(_) => Ok(()),
        CriterionSpec::TierScoreThreshold(c) => {
            if c.tier > n_tiers {
                return Err(Error::InvalidCriterion(format!(
                    "tier {} of {n_tiers}",
                    c.tier
                )));
            }
            Ok(())
        }
        CriterionSpec::StratumScoreThreshold(c) => {
            let j = n_strata
                .ok_or_else(|| Error::InvalidCriterion("population has no strata".into()))?;
            if c.stratum > j {
                return Err(Error::InvalidCriterion(format!(
                    "stratum {} of {j}",
                    c.stratum
                )));
            }
            Ok(())
        }
        CriterionSpec::WeightedSumThreshold(c) => {
            let arity = match c.scores {
                ScoreFamily::Mahalanobis => 1,
                ScoreFamily::Tiers => n_tiers,
                ScoreFamily::Strata => n_strata.ok_or_else(|| {
                    Error::InvalidCriterion("population has no strata".into())
                })?,
                ScoreFamily::PerCovariate => k,
            };
            if c.weights.len() != arity {
                return Err(Error::InvalidCriterion(format!(
                    "{} weights for {} scores",
                    c.weights.len(),
                    arity
                )));
            }
            Ok(())
        }
        CriterionSpec::PerCovariateBounds(c) => {
            if c.bounds.len() != k {
                return Err(Error::InvalidCriterion(format!(
                    "{} bounds for {k} covariates",
                    c.bounds.len()
                )));
            }
            Ok(())
        }
        CriterionSpec::Stratification(c) => {
            let strata = pop
                .strata()
                .ok_or_else(|| Error::InvalidCriterion("population has no strata".into()))?;
            if c.treated_per_stratum.len() != strata.n_strata() {
                return Err(Error::InvalidCriterion(format!(
                    "{} stratum targets for {} strata",
                    c.treated_per_stratum.len(),
                    strata.n_strata()
                )));
            }
            for (j, (&target, &size)) in c
                .treated_per_stratum
                .iter()
                .zip(&strata.counts())
                .enumerate()
            {
                if target > size {
                    return Err(Error::InvalidCriterion(format!(
                        "stratum {} holds {size} units but requires {target} treated",
                        j + 1
                    )));
                }
            }
            Ok(())
        }
        CriterionSpec::Intersection(c) => {
            c.children.iter().try_for_each(|ch| check_arity(ch, pop))
        }
    }
}

fn eval_node(spec: &CriterionSpec, s: &EvaluatedScores) -> f64 {
    fn indicator(ok: bool) -> f64 {
        if ok {
            1.0
        } else {
            0.0
        }
    }
    match spec {
        CriterionSpec::MahalanobisThreshold(c) => {
            indicator(s.mahalanobis.expect("cached") <= c.alpha)
        }
        CriterionSpec::TierScoreThreshold(c) => {
            indicator(s.tier.as_ref().expect("cached")[c.tier - 1] <= c.alpha)
        }
        CriterionSpec::StratumScoreThreshold(c) => {
            indicator(s.stratum.as_ref().expect("cached")[c.stratum - 1] <= c.alpha)
        }
        CriterionSpec::WeightedSumThreshold(c) => {
            let h = match c.scores {
                ScoreFamily::Mahalanobis => {
                    std::slice::from_ref(s.mahalanobis.as_ref().expect("cached"))
                }
                ScoreFamily::Tiers => s.tier.as_deref().expect("cached"),
                ScoreFamily::Strata => s.stratum.as_deref().expect("cached"),
                ScoreFamily::PerCovariate => s.percov.as_deref().expect("cached"),
            };
            weighted_sum_prob(c, h)
        }
        CriterionSpec::PerCovariateBounds(c) => {
            let h = s.percov.as_deref().expect("cached");
            indicator(h.iter().zip(&c.bounds).all(|(v, b)| v <= b))
        }
        CriterionSpec::Stratification(c) => {
            indicator(s.stratum_counts.as_deref().expect("cached") == c.treated_per_stratum)
        }
        CriterionSpec::Intersection(c) => c.children.iter().map(|ch| eval_node(ch, s)).product(),
        CriterionSpec::Stochastic(c) => c.p,
    }
}

fn weighted_sum_prob(c: &WeightedSumThreshold, h: &[f64]) -> f64 {
    let sum: f64 = c.weights.iter().zip(h).map(|(w, v)| w * v).sum();
    if sum < c.alpha {
        1.0
    } else if sum == c.alpha {
        c.tie_prob
    } else {
        0.0
    }
}

/// Acceptance probability of `w` for a one-off evaluation. Loops should
/// build a `PreparedCriterion` instead.
pub fn evaluate(
    spec: &CriterionSpec,
    pop: &CovariatePopulation,
    w: &Assignment,
) -> Result<f64> {
    PreparedCriterion::new(spec, pop)?.acceptance(w)
}

/// Evaluates a criterion directly on a score vector, for score-space
/// analysis where no unit-level data exists. Threshold nodes index into
/// `h`; stratification is undefined here.
pub fn evaluate_on_scores(spec: &CriterionSpec, h: &[f64]) -> Result<f64> {
    spec.validate()?;
    eval_on_scores_node(spec, h)
}

fn eval_on_scores_node(spec: &CriterionSpec, h: &[f64]) -> Result<f64> {
    fn indicator(ok: bool) -> f64 {
        if ok {
            1.0
        } else {
            0.0
        }
    }
    match spec {
        CriterionSpec::MahalanobisThreshold(c) => {
            if h.len() != 1 {
                return Err(Error::InvalidCriterion(format!(
                    "mahalanobis threshold expects 1 score, got {}",
                    h.len()
                )));
            }
            Ok(indicator(h[0] <= c.alpha))
        }
        CriterionSpec::TierScoreThreshold(c) => {
            if c.tier > h.len() {
                return Err(Error::InvalidCriterion(format!(
                    "tier {} of {}",
                    c.tier,
                    h.len()
                )));
            }
            Ok(indicator(h[c.tier - 1] <= c.alpha))
        }
        CriterionSpec::StratumScoreThreshold(c) => {
            if c.stratum > h.len() {
                return Err(Error::InvalidCriterion(format!(
                    "stratum {} of {}",
                    c.stratum,
                    h.len()
                )));
            }
            Ok(indicator(h[c.stratum - 1] <= c.alpha))
        }
        CriterionSpec::WeightedSumThreshold(c) => {
            if c.weights.len() != h.len() {
                return Err(Error::InvalidCriterion(format!(
                    "{} weights for {} scores",
                    c.weights.len(),
                    h.len()
                )));
            }
            Ok(weighted_sum_prob(c, h))
        }
        CriterionSpec::PerCovariateBounds(c) => {
            if c.bounds.len() != h.len() {
                return Err(Error::InvalidCriterion(format!(
                    "{} bounds for {} scores",
                    c.bounds.len(),
                    h.len()
                )));
            }
            Ok(indicator(h.iter().zip(&c.bounds).all(|(v, b)| v <= b)))
        }
        CriterionSpec::Stratification(_) => Err(Error::InvalidCriterion(
            "stratification needs unit-level data".into(),
        )),
        CriterionSpec::Intersection(c) => {
            let mut p = 1.0;
            for ch in &c.children {
                p *= eval_on_scores_node(ch, h)?;
            }
            Ok(p)
        }
        CriterionSpec::Stochastic(c) => Ok(c.p),
    }
}
