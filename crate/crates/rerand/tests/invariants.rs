//! Property tests for the structural invariants the library relies on:
//! affine invariance of scores, orthogonality of tier residuals, acceptance
//! probabilities staying probabilities, serialization round trips, and the
//! exact identities behind the variance and cost formulas.

use proptest::prelude::*;
use rerand::accum::WeightedMoments;
use rerand::analysis::{
    asymptotic_variance_intersection_tiers, expected_cost, select_candidates, staged_select,
    CostModel, ScoreSource,
};
use rerand::criteria::{evaluate_on_scores, tier_scores, Assignment, CriterionSpec, ScoreFamily};
use rerand::distributions::{chi2_cdf, chi2_quantile, mixture_quantile, v_factor, ChiSquareMixture};
use rerand::matrix::Matrix;
use rerand::stats::{block_orthogonalize, mahalanobis, CovariateMatrix, TierPartition};

fn matrix_strategy(n: usize, k: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, k), n)
        .prop_map(|rows| Matrix::from_rows(rows).unwrap())
}

/// Units in rows, enough spread to keep sample covariances invertible.
fn population_strategy(n: usize, k: usize) -> impl Strategy<Value = CovariateMatrix> {
    matrix_strategy(n, k)
        .prop_filter("sample covariance must be invertible", move |m| {
            let x = CovariateMatrix::with_default_labels(m.clone()).unwrap();
            mahalanobis(&x, &half_assignment(n)).is_ok()
        })
        .prop_map(|m| CovariateMatrix::with_default_labels(m).unwrap())
}

fn half_assignment(n: usize) -> Assignment {
    Assignment::new((0..n).map(|i| i % 2 == 0).collect()).unwrap()
}

fn assignment_strategy(n: usize) -> impl Strategy<Value = Assignment> {
    prop::collection::vec(any::<bool>(), n).prop_filter_map("needs both groups", |w| {
        let t = w.iter().filter(|&&b| b).count();
        (t >= 2 && w.len() - t >= 2).then(|| Assignment::new(w).unwrap())
    })
}

/// Arbitrary nested acceptance rule over two tier scores.
fn criterion_strategy() -> impl Strategy<Value = CriterionSpec> {
    let leaf = prop_oneof![
        (0.01f64..50.0).prop_map(|a| CriterionSpec::tier(1, a)),
        (0.01f64..50.0).prop_map(|a| CriterionSpec::tier(2, a)),
        ((0.05f64..2.0), (0.05f64..2.0), (0.01f64..50.0)).prop_map(|(w1, w2, a)| {
            CriterionSpec::weighted_sum(ScoreFamily::Tiers, vec![w1, w2], a)
        }),
        (0.05f64..1.0).prop_map(CriterionSpec::stochastic),
    ];
    leaf.prop_recursive(3, 16, 4, |inner| {
        prop::collection::vec(inner, 1..4).prop_map(CriterionSpec::intersection)
    })
}

proptest! {
    /// Swapping treatment and control labels flips the sign of every mean
    /// difference but leaves the quadratic balance statistic unchanged.
    #[test]
    fn mahalanobis_is_symmetric_under_label_swap(
        m in matrix_strategy(12, 3),
        w in assignment_strategy(12),
    ) {
        let x = match CovariateMatrix::with_default_labels(m) {
            Ok(x) => x,
            Err(_) => return Ok(()),
        };
        let (d, d_swapped) = match (
            mahalanobis(&x, &w),
            mahalanobis(&x, &complement(&w)),
        ) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return Ok(()),
        };
        prop_assert!((d - d_swapped).abs() <= 1e-8 * d.abs().max(1.0));
    }

    /// Invertible affine remaps of the covariates leave the statistic alone.
    #[test]
    fn mahalanobis_is_affinely_invariant(
        x in population_strategy(14, 3),
        w in assignment_strategy(14),
        raw in prop::collection::vec(-1.0f64..1.0, 12),
    ) {
        let base = match mahalanobis(&x, &w) {
            Ok(d) => d,
            Err(_) => return Ok(()),
        };
        let mut map = Matrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                map.set(i, j, raw[3 * i + j] + if i == j { 2.5 } else { 0.0 });
            }
        }
        let mut out = x.values().matmul(&map);
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v += raw[9 + j];
            }
        }
        let mapped = CovariateMatrix::with_default_labels(out).unwrap();
        let d = mahalanobis(&mapped, &w).unwrap();
        prop_assert!((d - base).abs() <= 1e-7 * base.abs().max(1.0));
    }

    /// Later-tier residuals carry no linear trace of earlier tiers: centered
    /// residual columns are orthogonal to every earlier raw column.
    #[test]
    fn tier_residuals_are_orthogonal_to_earlier_tiers(m in matrix_strategy(16, 4)) {
        let x = match CovariateMatrix::with_default_labels(m) {
            Ok(x) => x,
            Err(_) => return Ok(()),
        };
        let tiers = TierPartition::new(vec![2, 2]).unwrap();
        let (resid, _) = match block_orthogonalize(&x, &tiers) {
            Ok(r) => r,
            Err(_) => return Ok(()),
        };
        let n = x.n_units();
        let raw = x.values();
        // tier 2 residuals (columns 2, 3) against raw tier 1 (columns 0, 1)
        for rc in 2..4 {
            let mean: f64 = (0..n).map(|i| resid.get(i, rc)).sum::<f64>() / n as f64;
            for ec in 0..2 {
                let scale: f64 = (0..n).map(|i| raw.get(i, ec).powi(2)).sum::<f64>().max(1.0);
                let dot: f64 = (0..n)
                    .map(|i| (resid.get(i, rc) - mean) * raw.get(i, ec))
                    .sum();
                prop_assert!(dot.abs() <= 1e-7 * scale, "dot {dot} at column pair ({rc},{ec})");
            }
        }
    }

    /// Acceptance always evaluates to a probability, and intersections
    /// multiply exactly.
    #[test]
    fn acceptance_is_a_probability_and_intersections_multiply(
        specs in prop::collection::vec(criterion_strategy(), 1..4),
        h in prop::collection::vec(0.0f64..100.0, 2),
    ) {
        let mut product = 1.0;
        for spec in &specs {
            let p = evaluate_on_scores(spec, &h).unwrap();
            prop_assert!((0.0..=1.0).contains(&p), "acceptance {p} out of range");
            product *= p;
        }
        let joint = evaluate_on_scores(&CriterionSpec::intersection(specs), &h).unwrap();
        prop_assert!((joint - product).abs() <= 1e-12);
    }

    /// Criteria survive a JSON round trip unchanged, and foreign keys in the
    /// payload are rejected rather than ignored.
    #[test]
    fn criterion_json_round_trips_and_rejects_unknown_fields(spec in criterion_strategy()) {
        let text = serde_json::to_string(&spec).unwrap();
        let back: CriterionSpec = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(&back, &spec);

        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value.as_object_mut().unwrap().insert("bogus".into(), 1.into());
        let tampered = serde_json::to_string(&value).unwrap();
        prop_assert!(serde_json::from_str::<CriterionSpec>(&tampered).is_err());
    }

    /// Conditioning a chi-square on a finite upper threshold strictly
    /// shrinks its mean. Thresholds stay below the range where both cdf
    /// values round to 1.0 and the ratio saturates in f64.
    #[test]
    fn truncation_factor_lies_strictly_inside_unit_interval(
        k in 1u32..12,
        alpha in 0.01f64..60.0,
    ) {
        let v = v_factor(k, alpha).unwrap();
        prop_assert!(v > 0.0 && v < 1.0, "v({k}, {alpha}) = {v}");
    }

    /// The chi-square quantile inverts the cdf.
    #[test]
    fn chi2_quantile_inverts_cdf(k in 1u32..20, p in 0.001f64..0.999) {
        let q = chi2_quantile(k, p).unwrap();
        let back = chi2_cdf(k, q).unwrap();
        prop_assert!((back - p).abs() <= 1e-9, "cdf(quantile({p})) = {back}");
    }

    /// The per-block intersection variance admits a one-line closed form in
    /// the truncation factors; the implementation must hit it exactly.
    #[test]
    fn intersection_variance_matches_truncation_identity(
        r2 in prop::collection::vec(0.01f64..0.3, 3),
        alphas in prop::collection::vec(0.05f64..30.0, 3),
        var_g0 in 0.1f64..10.0,
    ) {
        let dofs = [2u32, 3, 4];
        let est = asymptotic_variance_intersection_tiers(var_g0, &r2, &dofs, &alphas).unwrap();
        let mut expect = 1.0;
        for t in 0..3 {
            expect -= (1.0 - v_factor(dofs[t], alphas[t]).unwrap()) * r2[t];
        }
        expect *= var_g0;
        prop_assert!((est.value - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        prop_assert_eq!(est.std_error, 0.0);
    }

    /// Selection depends only on the ranking of weighted score sums, so
    /// rescaling all scores or all weights by one positive constant changes
    /// nothing.
    #[test]
    fn selection_is_invariant_under_common_rescaling(
        m in matrix_strategy(9, 2),
        c in 0.1f64..10.0,
    ) {
        let scores = m;
        let abs = |mat: &Matrix, f: f64| {
            let mut out = mat.clone();
            for i in 0..out.rows() {
                for v in out.row_mut(i) {
                    *v = v.abs() * f;
                }
            }
            out
        };
        let base_scores = abs(&scores, 1.0);
        let weights = [1.0, 0.7];
        let picked = select_candidates(&base_scores, 4, &weights).unwrap();
        let scaled_scores = select_candidates(&abs(&scores, c), 4, &weights).unwrap();
        let scaled_weights = select_candidates(&base_scores, 4, &[c, 0.7 * c]).unwrap();
        prop_assert_eq!(&picked, &scaled_scores);
        prop_assert_eq!(&picked, &scaled_weights);
    }

    /// With no threshold filtering, staged screening keeps exactly the caps
    /// and bills one inquiry per surviving candidate per stage.
    #[test]
    fn staged_screening_counts_inquiries_exactly(
        m in matrix_strategy(12, 3),
        cap1 in 2usize..12,
        cap2 in 1usize..8,
    ) {
        let mut scores = m;
        for i in 0..scores.rows() {
            for v in scores.row_mut(i) {
                *v = v.abs();
            }
        }
        let caps = [12, cap1, cap2];
        let sel = staged_select(
            &scores,
            &caps,
            &[1.0, 1.0, 1.0],
            &[f64::INFINITY, f64::INFINITY, f64::INFINITY],
        )
        .unwrap();
        let mut survivors = 12usize;
        let mut inquiries = 0u64;
        for cap in caps {
            inquiries += survivors as u64;
            survivors = survivors.min(cap);
        }
        prop_assert_eq!(sel.inquiries, inquiries);
        prop_assert_eq!(sel.selected.len(), survivors);
        let mut sorted = sel.selected.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), sel.selected.len(), "duplicate selections");
    }

    /// The expected staged cost reported from a run equals the closed-form
    /// combination of its own cumulative pass rates: the estimator averages
    /// stage probabilities, not coin flips, so the identity is exact.
    #[test]
    fn expected_cost_matches_its_own_pass_rates(
        a1 in 0.5f64..8.0,
        a2 in 0.5f64..8.0,
        q in 0.2f64..0.9,
        costs in prop::collection::vec(0.1f64..5.0, 3),
    ) {
        let stages = vec![
            CriterionSpec::tier(1, a1),
            CriterionSpec::weighted_sum(ScoreFamily::Tiers, vec![1.0, 0.8], a2),
            CriterionSpec::stochastic(q),
        ];
        let cost = CostModel::new(costs.clone()).unwrap();
        let source = ScoreSource::ChiSquare { dofs: vec![2, 2] };
        let report = expected_cost(&stages, &cost, &source, 4_096, 31).unwrap();
        let expect = costs[0]
            + costs[1] * report.stage_pass_rates[0]
            + costs[2] * report.stage_pass_rates[1];
        prop_assert!((report.expected_cost - expect).abs() <= 1e-9 * expect.max(1.0));
    }

    /// Streaming weighted moments agree with the two-pass formulas.
    #[test]
    fn weighted_moments_match_direct_computation(
        data in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.01f64..3.0), 4..40),
    ) {
        let mut acc = WeightedMoments::new(2);
        for (a, b, w) in &data {
            acc.push(&[*a, *b], *w);
        }
        let total: f64 = data.iter().map(|(_, _, w)| w).sum();
        let mean = [
            data.iter().map(|(a, _, w)| a * w).sum::<f64>() / total,
            data.iter().map(|(_, b, w)| b * w).sum::<f64>() / total,
        ];
        let cov01: f64 = data
            .iter()
            .map(|(a, b, w)| w * (a - mean[0]) * (b - mean[1]))
            .sum::<f64>()
            / total;
        prop_assert!((acc.mean()[0] - mean[0]).abs() <= 1e-9);
        prop_assert!((acc.mean()[1] - mean[1]).abs() <= 1e-9);
        prop_assert!((acc.covariance().get(0, 1) - cov01).abs() <= 1e-9);
    }

    /// Assignments reconstruct exactly from their treated-index encoding.
    #[test]
    fn assignment_round_trips_through_treated_indices(w in assignment_strategy(10)) {
        let treated: Vec<usize> = (0..w.len()).filter(|&i| w.is_treated(i)).collect();
        let back = Assignment::from_treated_indices(w.len(), &treated).unwrap();
        prop_assert_eq!(back.n_treated(), w.n_treated());
        for i in 0..w.len() {
            prop_assert_eq!(back.is_treated(i), w.is_treated(i));
        }
    }
}

fn complement(w: &Assignment) -> Assignment {
    Assignment::new((0..w.len()).map(|i| !w.is_treated(i)).collect()).unwrap()
}

proptest! {
    // Each case pays for three Monte Carlo calibrations, so fewer cases.
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Mixture thresholds grow with the target acceptance and scale linearly
    /// with the weights; the scaling check exercises the Monte Carlo path
    /// because the weights are unequal.
    #[test]
    fn mixture_quantile_is_monotone_and_scales(
        p1 in 0.05f64..0.45,
        gap in 0.1f64..0.5,
        scale in 0.2f64..5.0,
    ) {
        let m = ChiSquareMixture::new(vec![1.0, 0.6], vec![2, 3]).unwrap();
        let lo = mixture_quantile(&m, p1, 200_000, 9).unwrap().threshold;
        let hi = mixture_quantile(&m, p1 + gap, 200_000, 9).unwrap().threshold;
        prop_assert!(lo < hi, "quantile not monotone: {lo} !< {hi}");

        let scaled = ChiSquareMixture::new(vec![scale, 0.6 * scale], vec![2, 3]).unwrap();
        let t = mixture_quantile(&scaled, p1, 200_000, 9).unwrap().threshold;
        prop_assert!((t - scale * lo).abs() <= 1e-9 * t.abs().max(1.0));
    }
}

/// Tier scores ignore shifts and per-tier invertible remaps even when later
/// tiers borrow earlier-tier columns; a plain unit check complements the
/// randomized acceptance coverage.
#[test]
fn tier_scores_survive_block_triangular_remap() {
    let rows = vec![
        vec![0.8, -1.2, 0.3, 2.0],
        vec![-0.5, 0.7, -1.1, 0.4],
        vec![1.6, 0.2, 0.9, -0.8],
        vec![-1.0, -0.4, 1.5, 1.1],
        vec![0.3, 1.9, -0.6, -1.4],
        vec![2.2, -0.9, 0.1, 0.6],
        vec![-1.7, 0.5, 1.2, -0.2],
        vec![0.9, 1.1, -1.8, 1.7],
        vec![-0.2, -1.5, 0.7, -1.0],
        vec![1.1, 0.8, -0.3, 0.9],
    ];
    let x = CovariateMatrix::from_rows(rows, vec!["a".into(), "b".into(), "c".into(), "d".into()])
        .unwrap();
    let tiers = TierPartition::new(vec![2, 2]).unwrap();
    let w = half_assignment(10);
    let base = tier_scores(&x, &tiers, &w).unwrap();

    let map = Matrix::from_rows(vec![
        vec![1.3, -0.4, 0.8, -0.6],
        vec![0.2, 0.9, -0.5, 0.3],
        vec![0.0, 0.0, 1.1, 0.7],
        vec![0.0, 0.0, -0.2, 1.4],
    ])
    .unwrap();
    let mut out = x.values().matmul(&map);
    for i in 0..out.rows() {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v += [3.0, -2.0, 0.5, 1.5][j];
        }
    }
    let mapped = CovariateMatrix::with_default_labels(out).unwrap();
    let scores = tier_scores(&mapped, &tiers, &w).unwrap();
    for t in 0..2 {
        let rel = (scores.values[t] - base.values[t]).abs() / base.values[t].abs().max(1.0);
        assert!(rel <= 1e-9, "tier {t}: {} vs {}", scores.values[t], base.values[t]);
    }
}
