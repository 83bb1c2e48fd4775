//! Numerical kernel: intraclass correlation from a two-way ANOVA, Pearson
//! correlation, Welch/Student t-tests and significance labels.
//!
//! All functions are pure. Two-sided p-values come from the regularized
//! incomplete beta function: for Student's t with `df` degrees of freedom,
//! `P(|T| > |t|) = I_{df/(df+t²)}(df/2, 1/2)`.

use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("need at least {min_n} targets and {min_k} raters, got {n}x{k}")]
    DimensionTooSmall {
        n: usize,
        k: usize,
        min_n: usize,
        min_k: usize,
    },
    #[error("rating matrix rows have unequal lengths")]
    Ragged,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("degenerate rating matrix: no variance to decompose")]
    DegenerateMatrix,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("zero variance")]
    ZeroVariance,
}

/// Complete `n` targets × `k` raters grid, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrix {
    n: usize,
    k: usize,
    values: Vec<f64>,
}

impl RatingMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, StatsError> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(StatsError::Ragged);
        }
        Self::from_flat(rows.len(), k, rows.concat())
    }

    pub fn from_flat(n: usize, k: usize, values: Vec<f64>) -> Result<Self, StatsError> {
        if n < 2 || k < 2 {
            return Err(StatsError::DimensionTooSmall {
                n,
                k,
                min_n: 2,
                min_k: 2,
            });
        }
        if values.len() != n * k {
            return Err(StatsError::LengthMismatch(values.len(), n * k));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
        Ok(RatingMatrix { n, k, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, target: usize, rater: usize) -> f64 {
        self.values[target * self.k + rater]
    }

    pub fn row(&self, target: usize) -> &[f64] {
        &self.values[target * self.k..(target + 1) * self.k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IccForm {
    /// Absolute agreement, mean of `k` raters: ICC(2,k) / ICC(A,k).
    #[serde(rename = "A_k")]
    AverageK,
    /// Absolute agreement, single rater: ICC(2,1) / ICC(A,1).
    #[serde(rename = "A_1")]
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IccResult {
    pub icc: f64,
    pub form: IccForm,
    pub ms_rows: f64,
    pub ms_cols: f64,
    pub ms_error: f64,
    pub n: usize,
    pub k: usize,
}

const DENOMINATOR_RTOL: f64 = 1e-10;

/// Absolute-agreement ICC. The point estimate is the same whether rater
/// effects are treated as random or fixed.
pub fn icc(m: &RatingMatrix, form: IccForm) -> Result<IccResult, StatsError> {
    let (n, k) = (m.n, m.k);
    let (nf, kf) = (n as f64, k as f64);
    let first = m.values[0];
    if m.values.iter().all(|&v| v == first) {
        return Err(StatsError::DegenerateMatrix);
    }

    let grand = m.values.iter().sum::<f64>() / (nf * kf);
    let row_means: Vec<f64> = (0..n).map(|i| m.row(i).iter().sum::<f64>() / kf).collect();
    let col_means: Vec<f64> = (0..k)
        .map(|j| (0..n).map(|i| m.get(i, j)).sum::<f64>() / nf)
        .collect();

    let ss_total: f64 = m.values.iter().map(|v| (v - grand).powi(2)).sum();
    let ss_rows = kf * row_means.iter().map(|r| (r - grand).powi(2)).sum::<f64>();
    // Rows that are each constant carry no rater or residual variance at all.
    let raters_agree = (0..n).all(|i| m.row(i).iter().all(|&v| v == m.get(i, 0)));
    let (ss_cols, ss_err) = if raters_agree {
        (0.0, 0.0)
    } else {
        let ss_cols = nf * col_means.iter().map(|c| (c - grand).powi(2)).sum::<f64>();
        (ss_cols, (ss_total - ss_rows - ss_cols).max(0.0))
    };

    let ms_rows = ss_rows / (nf - 1.0);
    let ms_cols = ss_cols / (kf - 1.0);
    let ms_error = ss_err / ((nf - 1.0) * (kf - 1.0));

    let numerator = ms_rows - ms_error;
    let (denominator, magnitude) = match form {
        IccForm::AverageK => (
            ms_rows + (ms_cols - ms_error) / nf,
            ms_rows + (ms_cols + ms_error) / nf,
        ),
        IccForm::Single => (
            ms_rows + (kf - 1.0) * ms_error + kf * (ms_cols - ms_error) / nf,
            ms_rows + (kf - 1.0) * ms_error + kf * (ms_cols + ms_error) / nf,
        ),
    };
    // A denominator that is only cancellation residue is treated as zero.
    if denominator <= DENOMINATOR_RTOL * magnitude || !denominator.is_finite() {
        return Err(StatsError::DegenerateMatrix);
    }
    Ok(IccResult {
        icc: numerator / denominator,
        form,
        ms_rows,
        ms_cols,
        ms_error,
        n,
        k,
    })
}

/// Reliability band with cut-points 0.5 / 0.75 / 0.9; a value equal to a
/// cut-point falls in the lower band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IccBand {
    Poor,
    Moderate,
    Good,
    Excellent,
}

impl IccBand {
    pub fn of(icc: f64) -> IccBand {
        if icc > 0.9 {
            IccBand::Excellent
        } else if icc > 0.75 {
            IccBand::Good
        } else if icc > 0.5 {
            IccBand::Moderate
        } else {
            IccBand::Poor
        }
    }
}

impl fmt::Display for IccBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IccBand::Poor => "poor",
            IccBand::Moderate => "moderate",
            IccBand::Good => "good",
            IccBand::Excellent => "excellent",
        })
    }
}

/// Sum that does not depend on input order.
fn stable_sum(xs: &[f64]) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Neumaier compensated summation.
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in sorted {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| stable_sum(xs) / xs.len() as f64)
}

/// Sample variance with an `n − 1` denominator; `None` below two values.
pub fn sample_variance(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    let first = xs[0];
    if xs.iter().all(|&v| v == first) {
        return Some(0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|v| (v - m).powi(2)).collect();
    Some(stable_sum(&dev) / (xs.len() - 1) as f64)
}

pub fn sample_sd(xs: &[f64]) -> Option<f64> {
    sample_variance(xs).map(f64::sqrt)
}

fn check_finite(xs: &[f64]) -> Result<(), StatsError> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

fn is_constant(xs: &[f64]) -> bool {
    xs.iter().all(|&v| v == xs[0])
}

/// Two-sided p-value for a Student-t statistic.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    beta_reg(df / 2.0, 0.5, x.clamp(0.0, 1.0)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p: f64,
    pub n: usize,
}

/// Pearson product-moment correlation with a two-sided t-test on `n − 2`
/// degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(StatsError::TooFewObservations { needed: 3, got: n });
    }
    check_finite(x)?;
    check_finite(y)?;
    if is_constant(x) || is_constant(y) {
        return Err(StatsError::ZeroVariance);
    }
    let mx = mean(x).unwrap_or_default();
    let my = mean(y).unwrap_or_default();
    let dx: Vec<f64> = x.iter().map(|v| v - mx).collect();
    let dy: Vec<f64> = y.iter().map(|v| v - my).collect();
    let sxy = stable_sum(&dx.iter().zip(&dy).map(|(a, b)| a * b).collect::<Vec<_>>());
    let sxx = stable_sum(&dx.iter().map(|a| a * a).collect::<Vec<_>>());
    let syy = stable_sum(&dy.iter().map(|b| b * b).collect::<Vec<_>>());
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        // df / (df + t²) simplifies to 1 − r².
        let df = (n - 2) as f64;
        let x = (1.0 - r) * (1.0 + r);
        beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
    };
    Ok(Correlation { r, p, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestKind {
    /// Unequal variances, Welch–Satterthwaite degrees of freedom.
    #[default]
    Welch,
    /// Pooled variance, `n_a + n_b − 2` degrees of freedom.
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

pub fn welch_t(a: &[f64], b: &[f64]) -> Result<TTest, StatsError> {
    t_test(a, b, TTestKind::Welch)
}

pub fn student_t(a: &[f64], b: &[f64]) -> Result<TTest, StatsError> {
    t_test(a, b, TTestKind::Student)
}

/// Two-sample t-test of `mean(a) − mean(b)`.
pub fn t_test(a: &[f64], b: &[f64], kind: TTestKind) -> Result<TTest, StatsError> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(StatsError::TooFewObservations {
                needed: 2,
                got: s.len(),
            });
        }
        check_finite(s)?;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a).unwrap_or_default(), mean(b).unwrap_or_default());
    let (va, vb) = (
        sample_variance(a).unwrap_or_default(),
        sample_variance(b).unwrap_or_default(),
    );
    if va == 0.0 && vb == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let (se2, df) = match kind {
        TTestKind::Welch => {
            let (qa, qb) = (va / na, vb / nb);
            let se2 = qa + qb;
            let df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
            (se2, df)
        }
        TTestKind::Student => {
            let df = na + nb - 2.0;
            let pooled = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
            (pooled * (1.0 / na + 1.0 / nb), df)
        }
    };
    let diff = ma - mb;
    let t = if diff == 0.0 { 0.0 } else { diff / se2.sqrt() };
    Ok(TTest {
        t,
        df,
        p: t_two_sided_p(t, df),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Significance {
    #[serde(rename = "ns")]
    NotSignificant,
    #[serde(rename = "*")]
    P05,
    #[serde(rename = "**")]
    P01,
    #[serde(rename = "***")]
    P001,
}

impl Significance {
    /// Star suffix for table cells; empty when not significant.
    pub fn stars(self) -> &'static str {
        match self {
            Significance::NotSignificant => "",
            Significance::P05 => "*",
            Significance::P01 => "**",
            Significance::P001 => "***",
        }
    }
}

impl fmt::Display for Significance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Significance::NotSignificant => f.write_str("ns"),
            other => f.write_str(other.stars()),
        }
    }
}

/// `p < 0.001` → `***`, `p < 0.01` → `**`, `p < 0.05` → `*`, otherwise `ns`.
pub fn significance_stars(p: f64) -> Significance {
    if p < 0.001 {
        Significance::P001
    } else if p < 0.01 {
        Significance::P01
    } else if p < 0.05 {
        Significance::P05
    } else {
        Significance::NotSignificant
    }
}
