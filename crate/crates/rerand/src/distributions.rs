//! Chi-square reference distributions and threshold calibration.
//!
//! Balance scores of the criteria implemented here converge to weighted sums
//! of independent chi-square variables, so thresholds targeting a given
//! acceptance probability are set against that limit: in closed form for a
//! single component, by seeded Monte Carlo otherwise.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accum::MeanVarAccumulator;
use crate::error::{Error, Result};
use crate::rng::{substream, Domain};

/// Minimum draw count accepted by `mixture_quantile`; below this the
/// empirical quantile is too noisy for calibration use.
pub const MIN_CALIBRATION_DRAWS: u64 = 100_000;

const MC_CHUNK: u64 = 8192;

fn lgamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7.
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        (pi / (pi * x).sin()).ln() - lgamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut a = COEF[0];
        for (i, &c) in COEF.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        let t = x + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }
}

/// Regularized lower incomplete gamma P(a, x): series for x < a+1, Lentz
/// continued fraction for the upper tail otherwise.
fn reg_lower_gamma(a: f64, x: f64) -> f64 {
    debug_assert!(a > 0.0);
    if x <= 0.0 {
        return 0.0;
    }
    let ln_pref = a * x.ln() - x - lgamma(a);
    if x < a + 1.0 {
        let mut ap = a;
        let mut sum = 1.0 / a;
        let mut del = sum;
        for _ in 0..600 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        (sum * ln_pref.exp()).clamp(0.0, 1.0)
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..600 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (1.0 - ln_pref.exp() * h).clamp(0.0, 1.0)
    }
}

/// P(chi-square with `k` degrees of freedom <= x). Negative x yields 0.
pub fn chi2_cdf(k: u32, x: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidDof);
    }
    if !x.is_finite() && x > 0.0 {
        return Ok(1.0);
    }
    Ok(reg_lower_gamma(k as f64 / 2.0, x / 2.0))
}

/// Inverse chi-square CDF by bracketing plus bisection to f64 resolution.
pub fn chi2_quantile(k: u32, p: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidDof);
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidProbability { value: p });
    }
    let a = k as f64 / 2.0;
    let cdf = |x: f64| reg_lower_gamma(a, x / 2.0);
    let mut lo = 0.0_f64;
    let mut hi = k as f64 + 10.0;
    while cdf(hi) < p {
        hi *= 2.0;
        if hi > 1e300 {
            break;
        }
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Variance-reduction factor of threshold rerandomization:
/// P(chi2_{k+2} <= alpha) / P(chi2_k <= alpha) = E[chi2_k | chi2_k <= alpha]/k.
///
/// When the denominator underflows (alpha far below the distribution's mass)
/// the small-alpha limit alpha/(k+2) is returned.
pub fn v_factor(k: u32, alpha: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidDof);
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidThreshold { value: alpha });
    }
    let num = chi2_cdf(k + 2, alpha)?;
    let den = chi2_cdf(k, alpha)?;
    if den == 0.0 {
        return Ok(alpha / (k + 2) as f64);
    }
    Ok((num / den).clamp(f64::MIN_POSITIVE, 1.0))
}

/// Weighted sum of independent chi-square variables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChiSquareMixture {
    weights: Vec<f64>,
    dofs: Vec<u32>,
}

impl ChiSquareMixture {
    pub fn new(weights: Vec<f64>, dofs: Vec<u32>) -> Result<Self> {
        if weights.is_empty() || weights.len() != dofs.len() {
            return Err(Error::InvalidData(
                "mixture weights and dofs must be nonempty and equal length".into(),
            ));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidData(
                "mixture weights must be finite and nonnegative".into(),
            ));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::InvalidData("mixture weights are all zero".into()));
        }
        if dofs.contains(&0) {
            return Err(Error::InvalidDof);
        }
        Ok(ChiSquareMixture { weights, dofs })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dofs(&self) -> &[u32] {
        &self.dofs
    }

    /// One joint draw of the raw (unweighted) component values. The number
    /// of RNG draws consumed depends only on the dofs, so reweighting a
    /// mixture rescales simulated sums without perturbing the stream.
    pub fn sample_components<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        sample_chi_squares(&self.dofs, rng, out);
    }

    pub fn weighted_total(&self, components: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(components)
            .map(|(w, c)| w * c)
            .sum()
    }
}

/// Independent chi-square draws, one per entry of `dofs`.
pub(crate) fn sample_chi_squares<R: Rng>(dofs: &[u32], rng: &mut R, out: &mut [f64]) {
    debug_assert_eq!(out.len(), dofs.len());
    for (slot, &k) in out.iter_mut().zip(dofs) {
        let mut s = 0.0;
        for _ in 0..k {
            let z: f64 = rng.sample(StandardNormal);
            s += z * z;
        }
        *slot = s;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    ClosedForm,
    MonteCarlo,
    /// Quantile of a finite score sample; exact for that sample.
    Empirical,
}

/// Threshold calibrated to hit a target acceptance probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub threshold: f64,
    pub target_p: f64,
    /// Acceptance probability re-measured at the threshold: exact for the
    /// closed form, estimated on an independent substream for Monte Carlo.
    pub achieved_p: f64,
    pub method: CalibrationMethod,
    /// 0 when the closed form was used.
    pub mc_draws: u64,
    pub mc_seed: u64,
    /// Declared bound on |achieved_p - target_p|.
    pub tolerance: f64,
}

/// Threshold alpha with P(mixture <= alpha) = p.
///
/// Single-component mixtures use the exact chi-square quantile. Otherwise
/// alpha is the empirical p-quantile of `mc_draws` simulated sums and
/// `achieved_p` is recomputed on an independent substream of the same size.
pub fn mixture_quantile(
    m: &ChiSquareMixture,
    p: f64,
    mc_draws: u64,
    seed: u64,
) -> Result<CalibrationResult> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidProbability { value: p });
    }
    if mc_draws < MIN_CALIBRATION_DRAWS {
        return Err(Error::InvalidData(format!(
            "mc_draws {mc_draws} below calibration minimum {MIN_CALIBRATION_DRAWS}"
        )));
    }
    // Components sharing one positive weight w pool into w * chi2 with the
    // summed dof, so the quantile is exact. Zero-weight components drop out.
    let active: Vec<usize> = (0..m.len()).filter(|&t| m.weights()[t] > 0.0).collect();
    let w0 = m.weights()[active[0]];
    if active.iter().all(|&t| m.weights()[t] == w0) {
        let k: u32 = active.iter().map(|&t| m.dofs()[t]).sum();
        let threshold = w0 * chi2_quantile(k, p)?;
        let achieved = chi2_cdf(k, threshold / w0)?;
        return Ok(CalibrationResult {
            threshold,
            target_p: p,
            achieved_p: achieved,
            method: CalibrationMethod::ClosedForm,
            mc_draws: 0,
            mc_seed: seed,
            tolerance: 1e-10,
        });
    }

    let mut values = simulate_mixture_sums(m, mc_draws, seed, Domain::MixtureDraw);
    let rank = (p * mc_draws as f64).ceil().max(1.0) as usize - 1;
    let (_, threshold, _) =
        values.select_nth_unstable_by(rank, |a, b| a.partial_cmp(b).expect("finite sums"));
    let threshold = *threshold;
    drop(values);

    let below = count_at_most(m, mc_draws, seed, Domain::MixtureCheck, threshold);
    let achieved = below as f64 / mc_draws as f64;
    // Quantile and re-check are independent estimates, each with binomial
    // error; 5 combined standard errors bounds their gap with margin.
    let tolerance = 5.0 * (2.0 * p * (1.0 - p) / mc_draws as f64).sqrt();
    Ok(CalibrationResult {
        threshold,
        target_p: p,
        achieved_p: achieved,
        method: CalibrationMethod::MonteCarlo,
        mc_draws,
        mc_seed: seed,
        tolerance,
    })
}

fn simulate_mixture_sums(
    m: &ChiSquareMixture,
    n_draws: u64,
    seed: u64,
    domain: Domain,
) -> Vec<f64> {
    let n_chunks = n_draws.div_ceil(MC_CHUNK);
    let chunks: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let start = chunk * MC_CHUNK;
            let end = (start + MC_CHUNK).min(n_draws);
            let mut comps = vec![0.0; m.len()];
            let mut out = Vec::with_capacity((end - start) as usize);
            for i in start..end {
                let mut rng = substream(seed, domain, i);
                m.sample_components(&mut rng, &mut comps);
                out.push(m.weighted_total(&comps));
            }
            out
        })
        .collect();
    let mut values = Vec::with_capacity(n_draws as usize);
    for c in chunks {
        values.extend(c);
    }
    values
}

fn count_at_most(
    m: &ChiSquareMixture,
    n_draws: u64,
    seed: u64,
    domain: Domain,
    threshold: f64,
) -> u64 {
    let n_chunks = n_draws.div_ceil(MC_CHUNK);
    (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let start = chunk * MC_CHUNK;
            let end = (start + MC_CHUNK).min(n_draws);
            let mut comps = vec![0.0; m.len()];
            let mut count = 0u64;
            for i in start..end {
                let mut rng = substream(seed, domain, i);
                m.sample_components(&mut rng, &mut comps);
                if m.weighted_total(&comps) <= threshold {
                    count += 1;
                }
            }
            count
        })
        .sum()
}

/// Monte Carlo estimate with its standard error and sample accounting.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McMean {
    pub value: f64,
    pub std_error: f64,
    pub accepted: u64,
    pub draws: u64,
}

/// E[raw component `component` | weighted mixture total <= alpha], estimated
/// by conditioning joint draws on the acceptance event.
pub fn truncated_mixture_component_mean(
    m: &ChiSquareMixture,
    alpha: f64,
    component: usize,
    mc_draws: u64,
    seed: u64,
) -> Result<McMean> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidThreshold { value: alpha });
    }
    if component >= m.len() {
        return Err(Error::InvalidData(format!(
            "component {component} out of range for {}-component mixture",
            m.len()
        )));
    }
    if mc_draws == 0 {
        return Err(Error::InvalidData("mc_draws must be positive".into()));
    }
    let n_chunks = mc_draws.div_ceil(MC_CHUNK);
    let partials: Vec<MeanVarAccumulator> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let start = chunk * MC_CHUNK;
            let end = (start + MC_CHUNK).min(mc_draws);
            let mut comps = vec![0.0; m.len()];
            let mut acc = MeanVarAccumulator::new();
            for i in start..end {
                let mut rng = substream(seed, Domain::TruncatedMoment, i);
                m.sample_components(&mut rng, &mut comps);
                if m.weighted_total(&comps) <= alpha {
                    acc.push(comps[component]);
                }
            }
            acc
        })
        .collect();
    let mut acc = MeanVarAccumulator::new();
    for p in &partials {
        acc.merge(p);
    }
    if acc.count() < 2 {
        return Err(Error::AcceptanceTooRare {
            accepted: acc.count(),
            draws: mc_draws,
        });
    }
    Ok(McMean {
        value: acc.mean(),
        std_error: acc.standard_error(),
        accepted: acc.count(),
        draws: mc_draws,
    })
}
