//! Score-space design analysis: construction of calibrated weighted-sum
//! criteria, statistical dominance comparison, staged inquiry-cost
//! accounting, candidate selection, and the asymptotic variance formulas
//! that drive tier and stratum weight choices.
//!
//! Everything here works on the joint distribution of balance scores, not
//! on unit-level data: either the limiting independent chi-square regime
//! (`ScoreSource::ChiSquare`) or an empirical sample of score rows
//! (`ScoreSource::Sample`). Monte Carlo estimates use one substream per
//! draw index, so results are independent of thread count.

use crate::criteria::{evaluate_on_scores, CriterionSpec, ScoreFamily};
use crate::distributions::{
    mixture_quantile, sample_chi_squares, truncated_mixture_component_mean, v_factor,
    CalibrationMethod, CalibrationResult, ChiSquareMixture,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{substream, Domain};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Batch count for batch-means standard errors. Batches are contiguous in
/// draw index, so shared-seed comparisons pair batch per batch.
const N_BATCHES: u64 = 64;

/// Minimum draws for any batched estimate; below this the batch standard
/// errors are meaningless.
pub const MIN_ANALYSIS_DRAWS: u64 = 2 * N_BATCHES;

/// Joint distribution of the balance-score vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScoreSource {
    /// Independent chi-squares with the given degrees of freedom, the
    /// limiting distribution of tier or stratum scores.
    ChiSquare { dofs: Vec<u32> },
    /// Finite sample of score rows. Draw `i` reads row `i mod N`, so any
    /// whole number of passes reproduces the sample exactly.
    Sample { scores: Matrix },
}

impl ScoreSource {
    pub fn arity(&self) -> usize {
        match self {
            ScoreSource::ChiSquare { dofs } => dofs.len(),
            ScoreSource::Sample { scores } => scores.cols(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ScoreSource::ChiSquare { dofs } => {
                if dofs.is_empty() {
                    return Err(Error::InvalidData("score source has no components".into()));
                }
                if dofs.contains(&0) {
                    return Err(Error::InvalidDof);
                }
            }
            ScoreSource::Sample { scores } => {
                if scores.rows() == 0 || scores.cols() == 0 {
                    return Err(Error::InvalidData("score sample is empty".into()));
                }
                for i in 0..scores.rows() {
                    if scores.row(i).iter().any(|v| !v.is_finite()) {
                        return Err(Error::InvalidData(format!(
                            "non-finite score in sample row {i}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn fill_draw(&self, seed: u64, index: u64, out: &mut [f64]) {
        match self {
            ScoreSource::ChiSquare { dofs } => {
                let mut rng = substream(seed, Domain::ScoreDraw, index);
                sample_chi_squares(dofs, &mut rng, out);
            }
            ScoreSource::Sample { scores } => {
                let row = (index % scores.rows() as u64) as usize;
                out.copy_from_slice(scores.row(row));
            }
        }
    }
}

fn validate_weights(weights: &[f64], arity: usize) -> Result<()> {
    if weights.len() != arity {
        return Err(Error::InvalidData(format!(
            "{} weights for {} scores",
            weights.len(),
            arity
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || weights.iter().all(|&w| w == 0.0) {
        return Err(Error::DegenerateWeights);
    }
    Ok(())
}

/// Builds the accept-iff-small criterion on the weighted score sum, with
/// its threshold calibrated so the acceptance probability under `source`
/// is `target_acceptance`. A single unit-weight score collapses to a plain
/// Mahalanobis threshold. All weights positive yields an admissible form.
pub fn construct_unified(
    weights: &[f64],
    source: &ScoreSource,
    target_acceptance: f64,
    mc_draws: u64,
    seed: u64,
) -> Result<(CriterionSpec, CalibrationResult)> {
    source.validate()?;
    validate_weights(weights, source.arity())?;
    if !(target_acceptance > 0.0 && target_acceptance < 1.0) {
        return Err(Error::InvalidProbability {
            value: target_acceptance,
        });
    }

    let calibration = match source {
        ScoreSource::ChiSquare { dofs } => {
            let mixture = ChiSquareMixture::new(weights.to_vec(), dofs.clone())?;
            mixture_quantile(&mixture, target_acceptance, mc_draws, seed)?
        }
        ScoreSource::Sample { scores } => {
            empirical_quantile(scores, weights, target_acceptance, seed)?
        }
    };

    let spec = if weights.len() == 1 && weights[0] == 1.0 {
        CriterionSpec::mahalanobis(calibration.threshold)
    } else {
        CriterionSpec::weighted_sum(ScoreFamily::Tiers, weights.to_vec(), calibration.threshold)
    };
    spec.validate()?;
    Ok((spec, calibration))
}

fn empirical_quantile(
    scores: &Matrix,
    weights: &[f64],
    p: f64,
    seed: u64,
) -> Result<CalibrationResult> {
    let n = scores.rows();
    let mut sums: Vec<f64> = (0..n)
        .map(|i| dot(weights, scores.row(i)))
        .collect();
    let rank = ((p * n as f64).ceil().max(1.0) as usize - 1).min(n - 1);
    let (_, threshold, _) =
        sums.select_nth_unstable_by(rank, |a, b| a.partial_cmp(b).expect("finite sums"));
    let threshold = *threshold;
    let below = sums.iter().filter(|&&s| s <= threshold).count();
    Ok(CalibrationResult {
        threshold,
        target_p: p,
        achieved_p: below as f64 / n as f64,
        method: CalibrationMethod::Empirical,
        mc_draws: n as u64,
        mc_seed: seed,
        // Exact for the sample; off target only by quantile granularity.
        tolerance: 1.0 / n as f64,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Outcome of a paired dominance comparison between two criteria on a
/// common score distribution. phi_prime dominates phi when it accepts at
/// least as often and conditionally balances every score at least as well,
/// one strictly; with Monte Carlo evidence each clause is tested at three
/// batch-means standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct DominanceVerdict {
    pub dominated: bool,
    pub acceptance_phi: f64,
    pub acceptance_phi_prime: f64,
    /// E[phi_prime] - E[phi].
    pub acceptance_delta: f64,
    pub acceptance_delta_se: f64,
    /// E[h_m | accepted] under each criterion.
    pub mean_scores_phi: Vec<f64>,
    pub mean_scores_phi_prime: Vec<f64>,
    /// E[h_m | phi_prime] - E[h_m | phi], paired across shared draws.
    pub per_score_deltas: Vec<f64>,
    pub per_score_delta_ses: Vec<f64>,
    /// 1-based index of a strictly improved score when dominated.
    pub strict_index: Option<usize>,
    pub draws: u64,
    pub seed: u64,
}

struct DominanceBatch {
    n: u64,
    sum_phi: f64,
    sum_phi_prime: f64,
    sum_phi_h: Vec<f64>,
    sum_phi_prime_h: Vec<f64>,
}

/// Tests whether `phi_prime` dominates `phi` over `n_draws` shared score
/// draws. Both criteria see identical draws, so the per-score deltas are
/// paired estimates; stochastic criteria contribute fractional weights.
pub fn dominance_test(
    phi: &CriterionSpec,
    phi_prime: &CriterionSpec,
    source: &ScoreSource,
    n_draws: u64,
    seed: u64,
) -> Result<DominanceVerdict> {
    source.validate()?;
    let arity = source.arity();
    let probe = vec![0.0; arity];
    evaluate_on_scores(phi, &probe)?;
    evaluate_on_scores(phi_prime, &probe)?;
    if n_draws < MIN_ANALYSIS_DRAWS {
        return Err(Error::InvalidData(format!(
            "n_draws {n_draws} below analysis minimum {MIN_ANALYSIS_DRAWS}"
        )));
    }

    let batches: Vec<DominanceBatch> = batch_ranges(n_draws)
        .into_par_iter()
        .map(|(start, end)| {
            let mut h = vec![0.0; arity];
            let mut b = DominanceBatch {
                n: end - start,
                sum_phi: 0.0,
                sum_phi_prime: 0.0,
                sum_phi_h: vec![0.0; arity],
                sum_phi_prime_h: vec![0.0; arity],
            };
            for i in start..end {
                source.fill_draw(seed, i, &mut h);
                let a = evaluate_on_scores(phi, &h).expect("probed spec");
                let ap = evaluate_on_scores(phi_prime, &h).expect("probed spec");
                b.sum_phi += a;
                b.sum_phi_prime += ap;
                for m in 0..arity {
                    b.sum_phi_h[m] += a * h[m];
                    b.sum_phi_prime_h[m] += ap * h[m];
                }
            }
            b
        })
        .collect();

    let total_phi: f64 = batches.iter().map(|b| b.sum_phi).sum();
    let total_phi_prime: f64 = batches.iter().map(|b| b.sum_phi_prime).sum();
    if total_phi <= 0.0 || total_phi_prime <= 0.0 {
        return Err(Error::AcceptanceTooRare {
            accepted: 0,
            draws: n_draws,
        });
    }

    let nf = n_draws as f64;
    let acceptance_phi = total_phi / nf;
    let acceptance_phi_prime = total_phi_prime / nf;
    let acceptance_delta = acceptance_phi_prime - acceptance_phi;
    let acc_batch: Vec<f64> = batches
        .iter()
        .map(|b| (b.sum_phi_prime - b.sum_phi) / b.n as f64)
        .collect();
    let acceptance_delta_se = batch_se(&acc_batch);

    let mut mean_scores_phi = vec![0.0; arity];
    let mut mean_scores_phi_prime = vec![0.0; arity];
    let mut per_score_deltas = vec![0.0; arity];
    let mut per_score_delta_ses = vec![0.0; arity];
    for m in 0..arity {
        let num: f64 = batches.iter().map(|b| b.sum_phi_h[m]).sum();
        let num_p: f64 = batches.iter().map(|b| b.sum_phi_prime_h[m]).sum();
        mean_scores_phi[m] = num / total_phi;
        mean_scores_phi_prime[m] = num_p / total_phi_prime;
        per_score_deltas[m] = mean_scores_phi_prime[m] - mean_scores_phi[m];

        // Paired batch ratio estimates; a batch counts only when both
        // criteria accepted some mass in it.
        let deltas: Vec<f64> = batches
            .iter()
            .filter(|b| b.sum_phi > 0.0 && b.sum_phi_prime > 0.0)
            .map(|b| b.sum_phi_prime_h[m] / b.sum_phi_prime - b.sum_phi_h[m] / b.sum_phi)
            .collect();
        if deltas.len() < 2 {
            return Err(Error::AcceptanceTooRare {
                accepted: deltas.len() as u64,
                draws: n_draws,
            });
        }
        per_score_delta_ses[m] = batch_se(&deltas);
    }

    let accepts_enough = acceptance_delta >= -3.0 * acceptance_delta_se;
    let none_worse = per_score_deltas
        .iter()
        .zip(&per_score_delta_ses)
        .all(|(d, se)| *d <= 3.0 * se);
    let strict = per_score_deltas
        .iter()
        .zip(&per_score_delta_ses)
        .position(|(d, se)| *d < -3.0 * se);
    let dominated = accepts_enough && none_worse && strict.is_some();

    Ok(DominanceVerdict {
        dominated,
        acceptance_phi,
        acceptance_phi_prime,
        acceptance_delta,
        acceptance_delta_se,
        mean_scores_phi,
        mean_scores_phi_prime,
        per_score_deltas,
        per_score_delta_ses,
        strict_index: if dominated { strict.map(|m| m + 1) } else { None },
        draws: n_draws,
        seed,
    })
}

fn batch_ranges(n: u64) -> Vec<(u64, u64)> {
    let len = n.div_ceil(N_BATCHES);
    (0..N_BATCHES)
        .map(|b| (b * len, ((b + 1) * len).min(n)))
        .filter(|(s, e)| e > s)
        .collect()
}

fn batch_se(batch_means: &[f64]) -> f64 {
    let b = batch_means.len() as f64;
    let mean = batch_means.iter().sum::<f64>() / b;
    let var = batch_means.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (b - 1.0);
    (var / b).sqrt()
}

/// Per-stage inquiry costs of a sequential screening procedure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostModel {
    pub per_stage_costs: Vec<f64>,
}

impl CostModel {
    pub fn new(per_stage_costs: Vec<f64>) -> Result<Self> {
        if per_stage_costs.is_empty() {
            return Err(Error::InvalidData("cost model has no stages".into()));
        }
        if per_stage_costs.iter().any(|c| !c.is_finite() || *c <= 0.0) {
            return Err(Error::InvalidData(
                "per-stage costs must be positive and finite".into(),
            ));
        }
        Ok(CostModel { per_stage_costs })
    }
}

/// Expected inquiry cost of running staged criteria until first rejection,
/// against the cost of always running every stage.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub expected_cost: f64,
    pub std_error: f64,
    /// Total cost when every stage always runs.
    pub naive_cost: f64,
    pub savings: f64,
    /// Probability of passing stages 1..=m, for each m.
    pub stage_pass_rates: Vec<f64>,
    pub draws: u64,
    pub seed: u64,
}

/// Estimates the expected cost of evaluating `stages` in order, paying
/// stage m's cost only when all earlier stages accepted. Stage acceptance
/// probabilities enter per draw, so a Stochastic stage contributes its
/// exact probability rather than a coin flip.
pub fn expected_cost(
    stages: &[CriterionSpec],
    cost: &CostModel,
    source: &ScoreSource,
    n_draws: u64,
    seed: u64,
) -> Result<CostReport> {
    source.validate()?;
    if stages.len() < 2 {
        return Err(Error::InvalidData(
            "staged cost needs at least 2 stages".into(),
        ));
    }
    if cost.per_stage_costs.len() != stages.len() {
        return Err(Error::InvalidData(format!(
            "{} costs for {} stages",
            cost.per_stage_costs.len(),
            stages.len()
        )));
    }
    CostModel::new(cost.per_stage_costs.clone())?;
    let arity = source.arity();
    let probe = vec![0.0; arity];
    for spec in stages {
        evaluate_on_scores(spec, &probe)?;
    }
    if n_draws < MIN_ANALYSIS_DRAWS {
        return Err(Error::InvalidData(format!(
            "n_draws {n_draws} below analysis minimum {MIN_ANALYSIS_DRAWS}"
        )));
    }

    struct CostBatch {
        n: u64,
        sum_cost: f64,
        sum_pass: Vec<f64>,
    }
    let m_stages = stages.len();
    let batches: Vec<CostBatch> = batch_ranges(n_draws)
        .into_par_iter()
        .map(|(start, end)| {
            let mut h = vec![0.0; arity];
            let mut b = CostBatch {
                n: end - start,
                sum_cost: 0.0,
                sum_pass: vec![0.0; m_stages],
            };
            for i in start..end {
                source.fill_draw(seed, i, &mut h);
                let mut surviving = 1.0;
                for (m, spec) in stages.iter().enumerate() {
                    b.sum_cost += cost.per_stage_costs[m] * surviving;
                    surviving *= evaluate_on_scores(spec, &h).expect("probed spec");
                    b.sum_pass[m] += surviving;
                }
            }
            b
        })
        .collect();

    let nf = n_draws as f64;
    let expected = batches.iter().map(|b| b.sum_cost).sum::<f64>() / nf;
    let cost_batch: Vec<f64> = batches.iter().map(|b| b.sum_cost / b.n as f64).collect();
    let std_error = batch_se(&cost_batch);
    let stage_pass_rates: Vec<f64> = (0..m_stages)
        .map(|m| batches.iter().map(|b| b.sum_pass[m]).sum::<f64>() / nf)
        .collect();
    let naive_cost: f64 = cost.per_stage_costs.iter().sum();

    Ok(CostReport {
        expected_cost: expected,
        std_error,
        naive_cost,
        savings: naive_cost - expected,
        stage_pass_rates,
        draws: n_draws,
        seed,
    })
}

/// Indices of the `n_select` candidates with the smallest weighted score
/// sums, ascending; ties break toward the smaller index.
pub fn select_candidates(scores: &Matrix, n_select: usize, weights: &[f64]) -> Result<Vec<usize>> {
    let n = scores.rows();
    if n == 0 {
        return Err(Error::InvalidData("no candidates".into()));
    }
    if n_select == 0 || n_select > n {
        return Err(Error::InvalidData(format!(
            "cannot select {n_select} of {n} candidates"
        )));
    }
    if weights.len() != scores.cols() {
        return Err(Error::InvalidData(format!(
            "{} weights for {} scores",
            weights.len(),
            scores.cols()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
        return Err(Error::DegenerateWeights);
    }
    for i in 0..n {
        if scores.row(i).iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite score in row {i}")));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let totals: Vec<f64> = (0..n).map(|i| dot(weights, scores.row(i))).collect();
    order.sort_by(|&a, &b| {
        totals[a]
            .partial_cmp(&totals[b])
            .expect("finite totals")
            .then(a.cmp(&b))
    });
    let mut selected = order[..n_select].to_vec();
    selected.sort_unstable();
    Ok(selected)
}

/// Result of staged candidate screening: the surviving indices and the
/// total number of score inquiries the stages performed.
#[derive(Debug, Clone, Serialize)]
pub struct StagedSelection {
    pub selected: Vec<usize>,
    pub inquiries: u64,
}

/// Screens candidates stage by stage. At stage m every surviving candidate
/// has its stage-m score inquired (counted), candidates whose cumulative
/// weighted score exceeds `thresholds[m]` are dropped, and at most
/// `stage_caps[m]` of the rest (smallest cumulative scores first) advance.
pub fn staged_select(
    scores: &Matrix,
    stage_caps: &[usize],
    weights: &[f64],
    thresholds: &[f64],
) -> Result<StagedSelection> {
    let n = scores.rows();
    let m_stages = scores.cols();
    if n == 0 || m_stages == 0 {
        return Err(Error::InvalidData("no candidates or no stages".into()));
    }
    if stage_caps.len() != m_stages || weights.len() != m_stages || thresholds.len() != m_stages {
        return Err(Error::InvalidData(format!(
            "{} caps, {} weights, {} thresholds for {} stages",
            stage_caps.len(),
            weights.len(),
            thresholds.len(),
            m_stages
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
        return Err(Error::DegenerateWeights);
    }
    for (m, t) in thresholds.iter().enumerate() {
        if t.is_nan() {
            return Err(Error::InvalidThreshold { value: thresholds[m] });
        }
    }
    for i in 0..n {
        if scores.row(i).iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite score in row {i}")));
        }
    }

    let mut survivors: Vec<usize> = (0..n).collect();
    let mut cumulative = vec![0.0; n];
    let mut inquiries = 0u64;
    for m in 0..m_stages {
        inquiries += survivors.len() as u64;
        for &i in &survivors {
            cumulative[i] += weights[m] * scores.get(i, m);
        }
        survivors.retain(|&i| cumulative[i] <= thresholds[m]);
        survivors.sort_by(|&a, &b| {
            cumulative[a]
                .partial_cmp(&cumulative[b])
                .expect("finite scores")
                .then(a.cmp(&b))
        });
        survivors.truncate(stage_caps[m]);
        if survivors.is_empty() {
            return Err(Error::EmptySelection);
        }
    }
    survivors.sort_unstable();
    Ok(StagedSelection {
        selected: survivors,
        inquiries,
    })
}

/// Asymptotic variance value with the Monte Carlo error of its truncated-
/// moment terms; zero error for closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub value: f64,
    pub std_error: f64,
}

fn validate_variance_inputs(var_g0: f64, r_squared: &[f64], dofs: &[u32]) -> Result<f64> {
    if !(var_g0 > 0.0) || !var_g0.is_finite() {
        return Err(Error::InvalidData(format!(
            "baseline variance must be positive, got {var_g0}"
        )));
    }
    if r_squared.is_empty() || r_squared.len() != dofs.len() {
        return Err(Error::InvalidData(format!(
            "{} r-squared values for {} score blocks",
            r_squared.len(),
            dofs.len()
        )));
    }
    if r_squared.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::InvalidData("r-squared values must be in [0, 1]".into()));
    }
    if dofs.contains(&0) {
        return Err(Error::InvalidDof);
    }
    let total: f64 = r_squared.iter().sum();
    if total > 1.0 + 1e-9 {
        return Err(Error::InvalidData(format!(
            "r-squared values sum to {total} > 1"
        )));
    }
    Ok(total.min(1.0))
}

/// Asymptotic variance of the scaled effect estimate under the unified
/// criterion accept iff sum_t pi_t h_t <= alpha, with block t explaining
/// fraction r_squared[t] of the baseline variance:
/// var_g0 * (sum_t (R2_t/k_t) E[chi2_{k_t} | accept] + 1 - sum_t R2_t).
/// The truncated means come from shared-seed Monte Carlo; the reported
/// standard error combines per-block errors in quadrature and ignores
/// their (positive) covariance across the shared draws.
pub fn asymptotic_variance_unified_tiers(
    var_g0: f64,
    r_squared: &[f64],
    dofs: &[u32],
    weights: &[f64],
    alpha: f64,
    mc_draws: u64,
    seed: u64,
) -> Result<VarianceEstimate> {
    let total_r2 = validate_variance_inputs(var_g0, r_squared, dofs)?;
    validate_weights(weights, dofs.len())?;
    if alpha.is_infinite() && alpha > 0.0 {
        return Ok(VarianceEstimate {
            value: var_g0,
            std_error: 0.0,
        });
    }

    let mixture = ChiSquareMixture::new(weights.to_vec(), dofs.to_vec())?;
    let mut reduced = 0.0;
    let mut se_sq = 0.0;
    for (t, (&r2, &k)) in r_squared.iter().zip(dofs).enumerate() {
        if r2 == 0.0 {
            continue;
        }
        let moment = truncated_mixture_component_mean(&mixture, alpha, t, mc_draws, seed)?;
        let scale = r2 / k as f64;
        reduced += scale * moment.value;
        se_sq += (scale * moment.std_error).powi(2);
    }
    Ok(VarianceEstimate {
        value: var_g0 * (reduced + 1.0 - total_r2),
        std_error: var_g0 * se_sq.sqrt(),
    })
}

/// Asymptotic variance under the intersection criterion accept iff
/// h_t <= alpha_t for every block, which factorizes into closed-form
/// truncated chi-square means: E[chi2_k | chi2_k <= a] = k v_{k,a}.
pub fn asymptotic_variance_intersection_tiers(
    var_g0: f64,
    r_squared: &[f64],
    dofs: &[u32],
    alphas: &[f64],
) -> Result<VarianceEstimate> {
    let total_r2 = validate_variance_inputs(var_g0, r_squared, dofs)?;
    if alphas.len() != dofs.len() {
        return Err(Error::InvalidData(format!(
            "{} thresholds for {} score blocks",
            alphas.len(),
            dofs.len()
        )));
    }
    let mut reduced = 0.0;
    for ((&r2, &k), &alpha) in r_squared.iter().zip(dofs).zip(alphas) {
        let v = if alpha.is_infinite() && alpha > 0.0 {
            1.0
        } else {
            v_factor(k, alpha)?
        };
        reduced += r2 / k as f64 * (k as f64 * v);
    }
    Ok(VarianceEstimate {
        value: var_g0 * (reduced + 1.0 - total_r2),
        std_error: 0.0,
    })
}

/// Criterion family for the stratified variance calculators.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StratifiedCriterionMode {
    /// Single threshold on the weighted sum of stratum scores.
    Unified {
        weights: Vec<f64>,
        alpha: f64,
        mc_draws: u64,
        seed: u64,
    },
    /// Per-stratum thresholds, all required.
    Intersection { alphas: Vec<f64> },
}

/// Asymptotic variance of a weighted stratum-difference estimate under
/// stratified rerandomization. Each stratum contributes a chi-square score
/// with the shared residual-covariate dof `k_r`; `r_squared[j]` is the
/// share of the baseline variance explained by stratum j's covariates, in
/// which the stratum scalings zeta_j = lambda_j^2 n / n_j are already
/// folded. zeta is validated and echoed for weight heuristics but does not
/// enter the formula again.
pub fn asymptotic_variance_stratified(
    var_g0: f64,
    zeta: &[f64],
    r_squared: &[f64],
    k_r: u32,
    mode: &StratifiedCriterionMode,
) -> Result<VarianceEstimate> {
    if zeta.len() != r_squared.len() {
        return Err(Error::InvalidData(format!(
            "{} stratum scalings for {} strata",
            zeta.len(),
            r_squared.len()
        )));
    }
    if zeta.iter().any(|z| !z.is_finite() || *z <= 0.0) {
        return Err(Error::InvalidData(
            "stratum scalings must be positive and finite".into(),
        ));
    }
    let dofs = vec![k_r; r_squared.len()];
    match mode {
        StratifiedCriterionMode::Unified {
            weights,
            alpha,
            mc_draws,
            seed,
        } => asymptotic_variance_unified_tiers(
            var_g0, r_squared, &dofs, weights, *alpha, *mc_draws, *seed,
        ),
        StratifiedCriterionMode::Intersection { alphas } => {
            asymptotic_variance_intersection_tiers(var_g0, r_squared, &dofs, alphas)
        }
    }
}

/// Variance-minimizing weights pi_t = R2_t / k_t for the unified tier
/// criterion, rescaled so the largest weight is 1.
pub fn optimal_tier_weights(r_squared: &[f64], dofs: &[u32]) -> Result<Vec<f64>> {
    if r_squared.is_empty() || r_squared.len() != dofs.len() {
        return Err(Error::InvalidData(format!(
            "{} r-squared values for {} score blocks",
            r_squared.len(),
            dofs.len()
        )));
    }
    if r_squared.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::InvalidData("r-squared values must be in [0, 1]".into()));
    }
    if dofs.contains(&0) {
        return Err(Error::InvalidDof);
    }
    let raw: Vec<f64> = r_squared
        .iter()
        .zip(dofs)
        .map(|(&r2, &k)| r2 / k as f64)
        .collect();
    let max = raw.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    Ok(raw.into_iter().map(|w| w / max).collect())
}

/// Stratum weights proportional to zeta_j (p_j (1-p_j))^{-1} lambda_max(S_j),
/// the operational stand-in for the unknown projected outcome variance;
/// rescaled so the largest weight is 1. Always positive, so the resulting
/// unified criterion is in admissible form.
pub fn heuristic_stratum_weights(
    covariances: &[Matrix],
    zeta: &[f64],
    propensities: &[f64],
) -> Result<Vec<f64>> {
    let j_strata = covariances.len();
    if j_strata == 0 || zeta.len() != j_strata || propensities.len() != j_strata {
        return Err(Error::InvalidData(format!(
            "{} covariances, {} scalings, {} propensities",
            j_strata,
            zeta.len(),
            propensities.len()
        )));
    }
    if zeta.iter().any(|z| !z.is_finite() || *z <= 0.0) {
        return Err(Error::InvalidData(
            "stratum scalings must be positive and finite".into(),
        ));
    }
    if propensities.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::InvalidData(
            "stratum propensities must lie in (0, 1)".into(),
        ));
    }
    let mut raw = Vec::with_capacity(j_strata);
    for (j, s) in covariances.iter().enumerate() {
        s.cholesky().map_err(|_| {
            Error::InsufficientStratum { stratum: j + 1 }
        })?;
        let lambda = largest_eigenvalue(s);
        raw.push(zeta[j] / (propensities[j] * (1.0 - propensities[j])) * lambda);
    }
    let max = raw.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    Ok(raw.into_iter().map(|w| w / max).collect())
}

/// Largest eigenvalue of an SPD matrix by power iteration. The start
/// vector is deliberately asymmetric so it cannot be orthogonal to the
/// leading eigenvector of a symmetric input by construction.
fn largest_eigenvalue(s: &Matrix) -> f64 {
    let n = s.rows();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * (i + 1) as f64).collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = norm(&v);
    v.iter_mut().for_each(|x| *x /= scale);
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let w = s.vecmul_left(&v);
        let next = dot(&v, &w);
        let wn = norm(&w);
        if wn == 0.0 {
            return 0.0;
        }
        v = w.into_iter().map(|x| x / wn).collect();
        if (next - lambda).abs() <= 1e-12 * next.abs().max(1.0) {
            return next;
        }
        lambda = next;
    }
    lambda
}
