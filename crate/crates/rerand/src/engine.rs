//! Assignment drawing, rerandomization, and balance diagnostics.
//!
//! Monte Carlo runs are chunked; chunks evaluate in parallel but merge in
//! index order, so reports are identical for any thread count. Acceptance
//! is accumulated with the criterion's probability as a weight, which
//! averages over stochastic rules without flipping their coins.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accum::WeightedMoments;
use crate::criteria::{Assignment, CriterionSpec, PreparedCriterion, ScoreVector};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::population::{CovariatePopulation, StratumInfo};
use crate::rng::{substream, Domain};
use crate::stats::group_mean_diff;

/// Assignments per parallel work unit. Fixed so results do not depend on
/// the thread count.
const MC_CHUNK: u64 = 4096;

/// Largest assignment space `enumerate_assignments` will walk.
pub const ENUMERATION_LIMIT: u64 = 1_000_000;

/// Default rerandomization budget.
pub const DEFAULT_MAX_DRAWS: u64 = 1_000_000;

/// How assignments are drawn before the balance criterion filters them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RandomizationPlan {
    Complete { treated: usize },
    Stratified { treated_per_stratum: Vec<usize> },
}

impl RandomizationPlan {
    pub fn validate_for(&self, n: usize, strata: Option<&StratumInfo>) -> Result<()> {
        match self {
            RandomizationPlan::Complete { treated } => {
                if !(1..n).contains(treated) {
                    return Err(Error::InvalidPlan(format!(
                        "{treated} treated of {n} units"
                    )));
                }
                Ok(())
            }
            RandomizationPlan::Stratified { treated_per_stratum } => {
                let strata = strata.ok_or_else(|| {
                    Error::InvalidPlan("stratified plan on a population without strata".into())
                })?;
                if treated_per_stratum.len() != strata.n_strata() {
                    return Err(Error::InvalidPlan(format!(
                        "{} stratum counts for {} strata",
                        treated_per_stratum.len(),
                        strata.n_strata()
                    )));
                }
                for (j, (&t, &size)) in
                    treated_per_stratum.iter().zip(&strata.counts()).enumerate()
                {
                    if !(1..size).contains(&t) {
                        return Err(Error::InvalidPlan(format!(
                            "stratum {}: {t} treated of {size} units",
                            j + 1
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<RandomizationPlan> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(file)?)
    }
}

/// Uniform draw from the plan's assignment set, deterministic in
/// (seed, index).
pub fn draw_assignment(
    plan: &RandomizationPlan,
    n: usize,
    strata: Option<&StratumInfo>,
    seed: u64,
    index: u64,
) -> Result<Assignment> {
    plan.validate_for(n, strata)?;
    let mut rng = substream(seed, Domain::AssignmentDraw, index);
    Ok(draw_prepared(plan, n, strata, &mut rng))
}

/// Draw loop core; the plan must already be validated.
fn draw_prepared(
    plan: &RandomizationPlan,
    n: usize,
    strata: Option<&StratumInfo>,
    rng: &mut impl Rng,
) -> Assignment {
    let mut w = vec![false; n];
    match plan {
        RandomizationPlan::Complete { treated } => {
            let mut pool: Vec<usize> = (0..n).collect();
            partial_shuffle_mark(&mut pool, *treated, rng, &mut w);
        }
        RandomizationPlan::Stratified { treated_per_stratum } => {
            let members = strata.expect("validated").members();
            for (units, &t) in members.iter().zip(treated_per_stratum) {
                let mut pool = units.clone();
                partial_shuffle_mark(&mut pool, t, rng, &mut w);
            }
        }
    }
    Assignment::new(w).expect("plan guarantees both arms")
}

fn partial_shuffle_mark(pool: &mut [usize], take: usize, rng: &mut impl Rng, w: &mut [bool]) {
    for i in 0..take {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
        w[pool[i]] = true;
    }
}

/// Draws until the criterion accepts. The acceptance coin for stochastic
/// rules uses its own substream per draw index, so deterministic criteria
/// consume no coin randomness and results stay aligned across criteria.
pub fn rerandomize(
    pop: &CovariatePopulation,
    plan: &RandomizationPlan,
    spec: &CriterionSpec,
    seed: u64,
    max_draws: u64,
) -> Result<(Assignment, u64)> {
    plan.validate_for(pop.n_units(), pop.strata())?;
    let prepared = PreparedCriterion::new(spec, pop)?;
    for index in 0..max_draws {
        let mut rng = substream(seed, Domain::AssignmentDraw, index);
        let w = draw_prepared(plan, pop.n_units(), pop.strata(), &mut rng);
        let phi = prepared.acceptance(&w)?;
        let accepted = if phi >= 1.0 {
            true
        } else if phi > 0.0 {
            let mut coin = substream(seed, Domain::AcceptanceCoin, index);
            coin.random::<f64>() < phi
        } else {
            false
        };
        if accepted {
            return Ok((w, index + 1));
        }
    }
    Err(Error::AcceptanceTooRare {
        accepted: 0,
        draws: max_draws,
    })
}

/// How a BalanceReport averaged over assignments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMethod {
    /// Acceptance probabilities used as weights.
    Weighted,
    /// Stochastic rules resolved by coin flip, 0/1 weights.
    CoinFlip,
    /// Exact expectation over the whole assignment set.
    Exact,
}

/// Monte Carlo (or exact) summary of a criterion's effect on balance.
#[derive(Debug, Clone, Serialize)]
pub struct BalanceReport {
    pub method: BalanceMethod,
    /// Seed of the run; absent for exact enumeration.
    pub seed: Option<u64>,
    pub draws: u64,
    /// Total acceptance weight; a count under coin flips, an expected count
    /// otherwise.
    pub accepted: f64,
    pub acceptance_rate: f64,
    pub covariate_labels: Vec<String>,
    /// Accepted-draw moments of the treated-minus-control mean vector.
    pub mean_diff: Vec<f64>,
    pub cov_diff: Matrix,
    /// Same moments over every draw, accepted or not.
    pub mean_diff_all: Vec<f64>,
    pub cov_diff_all: Matrix,
    /// Per-direction fraction of mean-difference variance removed by the
    /// criterion: 1 - accepted/all along each covariate axis.
    #[serde(rename = "priv")]
    pub variance_reduction: Vec<f64>,
    /// Average criterion scores over accepted draws.
    pub mean_scores: ScoreVector,
}

/// Settings for `monte_carlo_balance`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McConfig {
    pub draws: u64,
    pub seed: u64,
    /// Resolve stochastic rules with coin flips instead of weighting.
    #[serde(default)]
    pub coin_flip: bool,
}

struct BalanceAccum {
    all: WeightedMoments,
    accepted: WeightedMoments,
    score_sums: Vec<f64>,
    score_weight: f64,
}

impl BalanceAccum {
    fn new(k: usize, n_scores: usize) -> Self {
        BalanceAccum {
            all: WeightedMoments::new(k),
            accepted: WeightedMoments::new(k),
            score_sums: vec![0.0; n_scores],
            score_weight: 0.0,
        }
    }

    fn push(&mut self, diff: &[f64], scores: &[f64], weight: f64) {
        self.all.push(diff, 1.0);
        if weight > 0.0 {
            self.accepted.push(diff, weight);
            for (acc, s) in self.score_sums.iter_mut().zip(scores) {
                *acc += weight * s;
            }
            self.score_weight += weight;
        }
    }

    fn merge(&mut self, other: &BalanceAccum) {
        self.all.merge(&other.all);
        self.accepted.merge(&other.accepted);
        for (a, b) in self.score_sums.iter_mut().zip(&other.score_sums) {
            *a += b;
        }
        self.score_weight += other.score_weight;
    }
}

/// Estimates accepted and unconditional balance moments under the plan.
pub fn monte_carlo_balance(
    pop: &CovariatePopulation,
    plan: &RandomizationPlan,
    spec: &CriterionSpec,
    cfg: &McConfig,
) -> Result<BalanceReport> {
    if cfg.draws == 0 {
        return Err(Error::InvalidData("draws must be positive".into()));
    }
    plan.validate_for(pop.n_units(), pop.strata())?;
    let prepared = PreparedCriterion::new(spec, pop)?;
    let labels = prepared.score_labels();
    let k = pop.covariates().n_covariates();
    let values = pop.covariates().values();

    let n_chunks = cfg.draws.div_ceil(MC_CHUNK);
    let chunks: Vec<BalanceAccum> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| -> Result<BalanceAccum> {
            let lo = chunk * MC_CHUNK;
            let hi = (lo + MC_CHUNK).min(cfg.draws);
            let mut acc = BalanceAccum::new(k, labels.len());
            for index in lo..hi {
                let mut rng = substream(cfg.seed, Domain::AssignmentDraw, index);
                let w = draw_prepared(plan, pop.n_units(), pop.strata(), &mut rng);
                let phi = prepared.acceptance(&w)?;
                let weight = if cfg.coin_flip && phi > 0.0 && phi < 1.0 {
                    let mut coin = substream(cfg.seed, Domain::AcceptanceCoin, index);
                    if coin.random::<f64>() < phi {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    phi
                };
                let diff = group_mean_diff(values, &w).diff;
                let scores = if weight > 0.0 {
                    prepared.scores(&w)?.values
                } else {
                    Vec::new()
                };
                acc.push(&diff, &scores, weight);
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut total = BalanceAccum::new(k, labels.len());
    for chunk in &chunks {
        total.merge(chunk);
    }
    finish_report(
        total,
        labels,
        pop.covariates().column_labels().to_vec(),
        if cfg.coin_flip {
            BalanceMethod::CoinFlip
        } else {
            BalanceMethod::Weighted
        },
        Some(cfg.seed),
        cfg.draws,
    )
}

fn finish_report(
    total: BalanceAccum,
    score_labels: Vec<String>,
    covariate_labels: Vec<String>,
    method: BalanceMethod,
    seed: Option<u64>,
    draws: u64,
) -> Result<BalanceReport> {
    let accepted_weight = total.accepted.total_weight();
    if accepted_weight <= 0.0 {
        return Err(Error::AcceptanceTooRare { accepted: 0, draws });
    }
    let cov_diff = total.accepted.covariance();
    let cov_diff_all = total.all.covariance();
    let k = cov_diff.rows();
    let variance_reduction: Vec<f64> = (0..k)
        .map(|l| {
            let all = cov_diff_all.get(l, l);
            if all > 0.0 {
                1.0 - cov_diff.get(l, l) / all
            } else {
                0.0
            }
        })
        .collect();
    let mean_scores: Vec<f64> = total
        .score_sums
        .iter()
        .map(|s| s / total.score_weight)
        .collect();
    let all_weight = total.all.total_weight();
    Ok(BalanceReport {
        method,
        seed,
        draws,
        accepted: accepted_weight,
        acceptance_rate: accepted_weight / all_weight,
        covariate_labels,
        mean_diff: total.accepted.mean().to_vec(),
        cov_diff,
        mean_diff_all: total.all.mean().to_vec(),
        cov_diff_all,
        variance_reduction,
        mean_scores: ScoreVector {
            labels: score_labels,
            values: mean_scores,
        },
    })
}

/// Exact BalanceReport over every assignment the plan allows.
pub fn enumerate_assignments(
    pop: &CovariatePopulation,
    plan: &RandomizationPlan,
    spec: &CriterionSpec,
) -> Result<BalanceReport> {
    plan.validate_for(pop.n_units(), pop.strata())?;
    let count = assignment_count(plan, pop)?;
    if count > ENUMERATION_LIMIT as u128 {
        return Err(Error::TooLarge {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let prepared = PreparedCriterion::new(spec, pop)?;
    let labels = prepared.score_labels();
    let values = pop.covariates().values();
    let mut total = BalanceAccum::new(pop.covariates().n_covariates(), labels.len());

    let mut visit = |w: &Assignment| -> Result<()> {
        let phi = prepared.acceptance(w)?;
        let diff = group_mean_diff(values, w).diff;
        let scores = if phi > 0.0 {
            prepared.scores(w)?.values
        } else {
            Vec::new()
        };
        total.push(&diff, &scores, phi);
        Ok(())
    };

    match plan {
        RandomizationPlan::Complete { treated } => {
            let n = pop.n_units();
            let mut comb: Vec<usize> = (0..*treated).collect();
            loop {
                visit(&Assignment::from_treated_indices(n, &comb)?)?;
                if !next_combination(&mut comb, n) {
                    break;
                }
            }
        }
        RandomizationPlan::Stratified { treated_per_stratum } => {
            let members = pop.strata().expect("validated").members();
            // Odometer over per-stratum combinations.
            let mut combs: Vec<Vec<usize>> = treated_per_stratum
                .iter()
                .map(|&t| (0..t).collect())
                .collect();
            loop {
                let treated: Vec<usize> = combs
                    .iter()
                    .zip(&members)
                    .flat_map(|(comb, units)| comb.iter().map(|&c| units[c]))
                    .collect();
                visit(&Assignment::from_treated_indices(pop.n_units(), &treated)?)?;
                let mut j = combs.len();
                loop {
                    if j == 0 {
                        return finish_report(
                            total,
                            labels,
                            pop.covariates().column_labels().to_vec(),
                            BalanceMethod::Exact,
                            None,
                            count as u64,
                        );
                    }
                    j -= 1;
                    if next_combination(&mut combs[j], members[j].len()) {
                        break;
                    }
                    combs[j] = (0..treated_per_stratum[j]).collect();
                }
            }
        }
    }
    finish_report(
        total,
        labels,
        pop.covariates().column_labels().to_vec(),
        BalanceMethod::Exact,
        None,
        count as u64,
    )
}

fn assignment_count(plan: &RandomizationPlan, pop: &CovariatePopulation) -> Result<u128> {
    let capped = |n: usize, k: usize| -> u128 {
        let mut out: u128 = 1;
        let k = k.min(n - k);
        for i in 0..k {
            // Overflow-safe while staying exact below the cap region.
            out = out.saturating_mul((n - i) as u128) / (i as u128 + 1);
            if out > (ENUMERATION_LIMIT as u128) << 20 {
                return u128::MAX;
            }
        }
        out
    };
    Ok(match plan {
        RandomizationPlan::Complete { treated } => capped(pop.n_units(), *treated),
        RandomizationPlan::Stratified { treated_per_stratum } => {
            let counts = pop.strata().expect("validated").counts();
            let mut total: u128 = 1;
            for (&t, &size) in treated_per_stratum.iter().zip(&counts) {
                total = total.saturating_mul(capped(size, t));
            }
            total
        }
    })
}

/// Advances `comb` to the next k-combination of 0..n in lexicographic
/// order; false when exhausted.
fn next_combination(comb: &mut [usize], n: usize) -> bool {
    let m = comb.len();
    let mut i = m;
    while i > 0 {
        i -= 1;
        if comb[i] != i + n - m {
            comb[i] += 1;
            for j in i + 1..m {
                comb[j] = comb[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Caps the global worker pool. Call once, before any parallel work; later
/// calls are ignored. Results never depend on this.
pub fn configure_threads(threads: usize) {
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}
