//! Deterministic covariate statistics: sample moments, Mahalanobis
//! distances, group-mean differences, and block-wise orthogonalization of
//! tiered covariates.
//!
//! Everything here is a pure function of its arguments. Covariance always
//! uses divisor n-1. Singularity is detected by the Cholesky pivot rule and
//! reported, never papered over with a pseudo-inverse.

use std::path::Path;

use crate::criteria::Assignment;
use crate::error::{Error, Result};
use crate::matrix::{CholeskyFactor, Matrix};

/// An n x k covariate matrix with column labels. Rows are units.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateMatrix {
    values: Matrix,
    column_labels: Vec<String>,
}

impl CovariateMatrix {
    pub fn new(values: Matrix, column_labels: Vec<String>) -> Result<Self> {
        if values.rows() < 2 {
            return Err(Error::InvalidData("need at least 2 units".into()));
        }
        if values.cols() < 1 {
            return Err(Error::InvalidData("need at least 1 covariate".into()));
        }
        if column_labels.len() != values.cols() {
            return Err(Error::InvalidData(format!(
                "{} labels for {} columns",
                column_labels.len(),
                values.cols()
            )));
        }
        for i in 0..values.rows() {
            for v in values.row(i) {
                if !v.is_finite() {
                    return Err(Error::InvalidData(format!(
                        "non-finite covariate value in row {i}"
                    )));
                }
            }
        }
        Ok(CovariateMatrix {
            values,
            column_labels,
        })
    }

    /// Labels columns x1..xk.
    pub fn with_default_labels(values: Matrix) -> Result<Self> {
        let labels = (1..=values.cols()).map(|j| format!("x{j}")).collect();
        CovariateMatrix::new(values, labels)
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, column_labels: Vec<String>) -> Result<Self> {
        CovariateMatrix::new(Matrix::from_rows(rows)?, column_labels)
    }

    pub fn n_units(&self) -> usize {
        self.values.rows()
    }

    pub fn n_covariates(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn column_labels(&self) -> &[String] {
        &self.column_labels
    }

    /// Columns start..start+len as a new matrix.
    pub fn column_block(&self, start: usize, len: usize) -> Matrix {
        column_block_of(&self.values, start, len)
    }

    /// Reads a CSV with a header row of labels, one unit per row.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let labels: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let mut row = Vec::with_capacity(labels.len());
            for (j, field) in record.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::InvalidData(format!("row {}, column {}: not a number", i + 1, j + 1))
                })?;
                row.push(v);
            }
            rows.push(row);
        }
        CovariateMatrix::from_rows(rows, labels)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(&self.column_labels)?;
        for i in 0..self.n_units() {
            let fields: Vec<String> = self.values.row(i).iter().map(|v| v.to_string()).collect();
            writer.write_record(&fields)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Contiguous covariate blocks in decreasing order of importance.
#[derive(Debug, Clone, PartialEq)]
pub struct TierPartition {
    tier_sizes: Vec<usize>,
}

impl TierPartition {
    pub fn new(tier_sizes: Vec<usize>) -> Result<Self> {
        if tier_sizes.is_empty() || tier_sizes.contains(&0) {
            return Err(Error::InvalidData(
                "tier sizes must be nonempty and positive".into(),
            ));
        }
        Ok(TierPartition { tier_sizes })
    }

    /// All covariates in one tier.
    pub fn single(k: usize) -> Self {
        TierPartition { tier_sizes: vec![k] }
    }

    pub fn n_tiers(&self) -> usize {
        self.tier_sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.tier_sizes
    }

    pub fn total(&self) -> usize {
        self.tier_sizes.iter().sum()
    }

    /// Column range of tier `t` (0-based).
    pub fn range(&self, t: usize) -> std::ops::Range<usize> {
        let start: usize = self.tier_sizes[..t].iter().sum();
        start..start + self.tier_sizes[t]
    }

    pub fn check_covers(&self, k: usize) -> Result<()> {
        if self.total() != k {
            return Err(Error::InvalidData(format!(
                "tier sizes sum to {} but there are {} covariates",
                self.total(),
                k
            )));
        }
        Ok(())
    }
}

/// Treatment-minus-control means per covariate.
#[derive(Debug, Clone)]
pub struct GroupMeanDiff {
    pub treated_mean: Vec<f64>,
    pub control_mean: Vec<f64>,
    pub diff: Vec<f64>,
}

/// Group means of `values` rows split by assignment.
pub fn group_mean_diff(values: &Matrix, w: &Assignment) -> GroupMeanDiff {
    assert_eq!(values.rows(), w.len(), "assignment length mismatch");
    let k = values.cols();
    let mut treated = vec![0.0; k];
    let mut control = vec![0.0; k];
    for i in 0..values.rows() {
        let target = if w.is_treated(i) {
            &mut treated
        } else {
            &mut control
        };
        for (acc, v) in target.iter_mut().zip(values.row(i)) {
            *acc += v;
        }
    }
    let n1 = w.n_treated() as f64;
    let n0 = w.n_control() as f64;
    for v in &mut treated {
        *v /= n1;
    }
    for v in &mut control {
        *v /= n0;
    }
    let diff = treated
        .iter()
        .zip(&control)
        .map(|(a, b)| a - b)
        .collect();
    GroupMeanDiff {
        treated_mean: treated,
        control_mean: control,
        diff,
    }
}

/// Sample covariance of the columns, divisor n-1.
pub fn sample_covariance(x: &CovariateMatrix) -> Matrix {
    covariance_of(x.values())
}

pub(crate) fn covariance_of(values: &Matrix) -> Matrix {
    let n = values.rows();
    let k = values.cols();
    assert!(n >= 2, "covariance needs at least 2 rows");
    let mut means = vec![0.0; k];
    for i in 0..n {
        for (m, v) in means.iter_mut().zip(values.row(i)) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut cov = Matrix::zeros(k, k);
    let mut centered = vec![0.0; k];
    for i in 0..n {
        for (c, (v, m)) in centered.iter_mut().zip(values.row(i).iter().zip(&means)) {
            *c = v - m;
        }
        for a in 0..k {
            for b in 0..=a {
                let v = cov.get(a, b) + centered[a] * centered[b];
                cov.set(a, b, v);
                if a != b {
                    cov.set(b, a, v);
                }
            }
        }
    }
    let div = (n - 1) as f64;
    for a in 0..k {
        for b in 0..k {
            cov.set(a, b, cov.get(a, b) / div);
        }
    }
    cov
}

pub(crate) fn column_block_of(values: &Matrix, start: usize, len: usize) -> Matrix {
    let mut out = Matrix::zeros(values.rows(), len);
    for i in 0..values.rows() {
        for j in 0..len {
            out.set(i, j, values.get(i, start + j));
        }
    }
    out
}

/// Squared Mahalanobis distance between group means:
/// n p_w (1 - p_w) (xbar_1 - xbar_0) S^{-1} (xbar_1 - xbar_0)'.
pub fn mahalanobis(x: &CovariateMatrix, w: &Assignment) -> Result<f64> {
    if w.len() != x.n_units() {
        return Err(Error::InvalidData(
            "assignment length does not match number of units".into(),
        ));
    }
    let chol = cholesky_or_singular(&sample_covariance(x))?;
    Ok(mahalanobis_quad(x.values(), w, &chol))
}

/// Quadratic-form core shared with criterion evaluation; `chol` factors the
/// sample covariance of `values`.
pub(crate) fn mahalanobis_quad(values: &Matrix, w: &Assignment, chol: &CholeskyFactor) -> f64 {
    let d = group_mean_diff(values, w).diff;
    let n = w.len() as f64;
    let n1 = w.n_treated() as f64;
    // n p(1-p) = n1 n0 / n
    let scale = n1 * (n - n1) / n;
    scale * chol.quad_form_inv(&d)
}

pub(crate) fn cholesky_or_singular(s: &Matrix) -> Result<CholeskyFactor> {
    s.cholesky().map_err(|e| match e {
        Error::NotPositiveDefinite => Error::SingularCovariance,
        other => other,
    })
}

/// Fitted projection of each tier on the tiers before it, reusable on new
/// rows drawn from the same population.
#[derive(Debug, Clone)]
pub struct ProjectionRecord {
    /// Entry t (0-based tier) is None for tier 0, otherwise a
    /// (1 + earlier columns) x k_t matrix: row 0 intercepts, then one row of
    /// coefficients per earlier raw covariate column.
    blocks: Vec<Option<Matrix>>,
}

impl ProjectionRecord {
    pub fn coefficients(&self, t: usize) -> Option<&Matrix> {
        self.blocks[t].as_ref()
    }

    /// Applies the recorded projections to rows with the same column layout.
    pub fn apply(&self, values: &Matrix, tiers: &TierPartition) -> Result<Matrix> {
        tiers.check_covers(values.cols())?;
        if tiers.n_tiers() != self.blocks.len() {
            return Err(Error::InvalidData("tier count mismatch".into()));
        }
        let mut out = Matrix::zeros(values.rows(), values.cols());
        for t in 0..tiers.n_tiers() {
            let range = tiers.range(t);
            match &self.blocks[t] {
                None => {
                    for i in 0..values.rows() {
                        for j in range.clone() {
                            out.set(i, j, values.get(i, j));
                        }
                    }
                }
                Some(coef) => {
                    let p = range.start;
                    for i in 0..values.rows() {
                        for (c, j) in range.clone().enumerate() {
                            let mut fitted = coef.get(0, c);
                            for reg in 0..p {
                                fitted += coef.get(reg + 1, c) * values.get(i, reg);
                            }
                            out.set(i, j, values.get(i, j) - fitted);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Block-wise Gram-Schmidt: tier 1 passes through; each later tier is
/// replaced by its least-squares residual on an intercept plus all earlier
/// raw tiers. Output keeps the input shape and column order.
pub fn block_orthogonalize(
    x: &CovariateMatrix,
    tiers: &TierPartition,
) -> Result<(Matrix, ProjectionRecord)> {
    tiers.check_covers(x.n_covariates())?;
    let values = x.values();
    let n = values.rows();
    let mut blocks: Vec<Option<Matrix>> = vec![None];
    let mut residuals = Matrix::zeros(n, values.cols());
    let first = tiers.range(0);
    for i in 0..n {
        for j in first.clone() {
            residuals.set(i, j, values.get(i, j));
        }
    }

    for t in 1..tiers.n_tiers() {
        let range = tiers.range(t);
        let p = range.start;
        let kt = range.len();

        // Center regressors and responses; solving the centered normal
        // equations keeps the Gram matrix well conditioned under large
        // covariate offsets.
        let mut reg_means = vec![0.0; p];
        let mut resp_means = vec![0.0; kt];
        for i in 0..n {
            let row = values.row(i);
            for (m, v) in reg_means.iter_mut().zip(&row[..p]) {
                *m += v;
            }
            for (m, v) in resp_means.iter_mut().zip(&row[range.start..range.end]) {
                *m += v;
            }
        }
        for m in reg_means.iter_mut().chain(resp_means.iter_mut()) {
            *m /= n as f64;
        }

        let mut gram = Matrix::zeros(p, p);
        let mut cross = Matrix::zeros(p, kt);
        let mut cr = vec![0.0; p];
        let mut cy = vec![0.0; kt];
        for i in 0..n {
            let row = values.row(i);
            for (c, (v, m)) in cr.iter_mut().zip(row[..p].iter().zip(&reg_means)) {
                *c = v - m;
            }
            for (c, (v, m)) in cy
                .iter_mut()
                .zip(row[range.start..range.end].iter().zip(&resp_means))
            {
                *c = v - m;
            }
            for a in 0..p {
                for b in 0..=a {
                    let v = gram.get(a, b) + cr[a] * cr[b];
                    gram.set(a, b, v);
                    if a != b {
                        gram.set(b, a, v);
                    }
                }
                for b in 0..kt {
                    cross.set(a, b, cross.get(a, b) + cr[a] * cy[b]);
                }
            }
        }

        let chol = gram
            .cholesky()
            .map_err(|_| Error::CollinearTiers { tier: t + 1 })?;
        // Coefficients on centered regressors, one response column at a time.
        let mut coef = Matrix::zeros(p + 1, kt);
        let mut col = vec![0.0; p];
        for b in 0..kt {
            for a in 0..p {
                col[a] = cross.get(a, b);
            }
            let beta = chol.solve_vec(&col);
            let mut intercept = resp_means[b];
            for a in 0..p {
                intercept -= beta[a] * reg_means[a];
                coef.set(a + 1, b, beta[a]);
            }
            coef.set(0, b, intercept);
        }

        for i in 0..n {
            let row = values.row(i);
            for (b, j) in range.clone().enumerate() {
                let mut fitted = coef.get(0, b);
                for a in 0..p {
                    fitted += coef.get(a + 1, b) * row[a];
                }
                residuals.set(i, j, row[j] - fitted);
            }
        }
        blocks.push(Some(coef));
    }

    Ok((residuals, ProjectionRecord { blocks }))
}

/// Lower-triangular L with S^{-1} = L L'. Transforming rows by L maps a
/// distribution with covariance S to identity covariance.
pub fn cholesky_inverse_factor(s: &Matrix) -> Result<Matrix> {
    let inv = s.cholesky()?.inverse();
    Ok(inv.cholesky()?.lower().clone())
}
