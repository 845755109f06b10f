//! Calendar covariates, a log-link Poisson GLM with offset, month-encoding
//! selection by AIC, and the resulting exposure series.

use chrono::{Datelike, Duration, NaiveDate};
use nalgebra::{DMatrix, DVector};
use statrs::function::factorial::ln_factorial;

use crate::error::{invalid, Error, Result};

/// Daily month covariates.
pub trait MonthEncoding: std::fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;
    fn column_names(&self) -> Vec<String>;
    /// Appends this encoding's covariates for `date` to `row`.
    fn encode(&self, date: NaiveDate, row: &mut Vec<f64>);
}

/// Months mapped to groups; indicators for every group but the first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupedMonths {
    groups: [usize; 12],
    count: usize,
}

impl GroupedMonths {
    /// `groups[m]` is the group of calendar month `m + 1`; groups are
    /// numbered from 0 and group 0 is the baseline.
    pub fn new(groups: [usize; 12]) -> Result<Self> {
        let count = groups.iter().max().map_or(0, |m| m + 1);
        if (0..count).any(|g| !groups.contains(&g)) {
            return Err(invalid("month groups must be numbered 0..k without gaps"));
        }
        Ok(Self { groups, count })
    }

    pub fn groups(&self) -> &[usize; 12] {
        &self.groups
    }
}

impl MonthEncoding for GroupedMonths {
    fn name(&self) -> &'static str {
        "grouped"
    }

    fn column_names(&self) -> Vec<String> {
        (1..self.count).map(|g| format!("month_group_{g}")).collect()
    }

    fn encode(&self, date: NaiveDate, row: &mut Vec<f64>) {
        let g = self.groups[date.month0() as usize];
        row.extend((1..self.count).map(|k| if k == g { 1.0 } else { 0.0 }));
    }
}

/// Continuous piecewise-linear function of the position within the year,
/// measured in months from 1 January, with hinges at `knots`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonthSpline {
    knots: Vec<f64>,
}

impl MonthSpline {
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        if knots.iter().any(|k| !(0.0..12.0).contains(k)) || knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("spline knots must increase within [0, 12)"));
        }
        Ok(Self { knots })
    }

    /// Knots at every month boundary after January.
    pub fn month_boundaries() -> Self {
        Self { knots: (1..12).map(f64::from).collect() }
    }

    fn position(date: NaiveDate) -> f64 {
        let days_in_month = match date.month() {
            12 => 31,
            m => (NaiveDate::from_ymd_opt(date.year(), m + 1, 1).unwrap() - Duration::days(1)).day(),
        };
        date.month0() as f64 + date.day0() as f64 / days_in_month as f64
    }
}

impl MonthEncoding for MonthSpline {
    fn name(&self) -> &'static str {
        "spline"
    }

    fn column_names(&self) -> Vec<String> {
        std::iter::once("month_linear".to_string()).chain(self.knots.iter().map(|k| format!("month_hinge_{k}"))).collect()
    }

    fn encode(&self, date: NaiveDate, row: &mut Vec<f64>) {
        let x = Self::position(date);
        row.push(x);
        row.extend(self.knots.iter().map(|&k| (x - k).max(0.0)));
    }
}

/// Parses a month encoding by name. `spec` is a comma-separated list: group
/// labels for the twelve months (`grouped`) or knots in months (`spline`,
/// empty for month boundaries).
pub fn month_encoding_by_name(name: &str, spec: &str) -> Result<Box<dyn MonthEncoding>> {
    let nums = || -> Result<Vec<f64>> {
        spec.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| invalid(format!("bad number {s:?} in month encoding"))))
            .collect()
    };
    match name {
        "grouped" => {
            let v = nums()?;
            if v.len() != 12 || v.iter().any(|g| g.fract() != 0.0 || *g < 0.0) {
                return Err(invalid("grouped months need twelve non-negative integer labels"));
            }
            let mut groups = [0usize; 12];
            for (g, x) in groups.iter_mut().zip(v) {
                *g = x as usize;
            }
            Ok(Box::new(GroupedMonths::new(groups)?))
        }
        "spline" => {
            let v = nums()?;
            Ok(Box::new(if v.is_empty() { MonthSpline::month_boundaries() } else { MonthSpline::new(v)? }))
        }
        other => Err(invalid(format!("unknown month encoding {other:?}; known: {}", month_encoding_names().join(", ")))),
    }
}

pub fn month_encoding_names() -> Vec<&'static str> {
    vec!["grouped", "spline"]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrendUnit {
    Days,
    Years,
}

/// Calendar window and the covariates shared by all candidate designs.
#[derive(Debug, Clone, PartialEq)]
pub struct Calendar {
    pub start: NaiveDate,
    pub days: usize,
    pub holidays: Vec<NaiveDate>,
    pub trend: TrendUnit,
}

impl Calendar {
    pub fn new(start: NaiveDate, days: usize) -> Self {
        Self { start, days, holidays: Vec::new(), trend: TrendUnit::Days }
    }

    pub fn date(&self, day: usize) -> NaiveDate {
        self.start + Duration::days(day as i64)
    }
}

/// Daily design matrix: intercept, six weekday indicators (Monday is the
/// baseline), month covariates, a holiday indicator when any holiday falls in
/// the window, and a linear trend.
#[derive(Debug, Clone)]
pub struct CalendarDesign {
    encoding: String,
    columns: Vec<String>,
    x: DMatrix<f64>,
}

impl CalendarDesign {
    pub fn build(calendar: &Calendar, months: &dyn MonthEncoding) -> Result<Self> {
        if calendar.days == 0 {
            return Err(invalid("calendar is empty"));
        }
        let has_holidays = (0..calendar.days).any(|d| calendar.holidays.contains(&calendar.date(d)));
        let mut columns = vec!["intercept".to_string()];
        columns.extend(["tue", "wed", "thu", "fri", "sat", "sun"].map(String::from));
        columns.extend(months.column_names());
        if has_holidays {
            columns.push("holiday".into());
        }
        columns.push("trend".into());
        let mut data = Vec::with_capacity(calendar.days * columns.len());
        let mut row = Vec::with_capacity(columns.len());
        for d in 0..calendar.days {
            let date = calendar.date(d);
            row.clear();
            row.push(1.0);
            let wd = date.weekday().num_days_from_monday() as usize;
            row.extend((1..7).map(|k| if k == wd { 1.0 } else { 0.0 }));
            months.encode(date, &mut row);
            if has_holidays {
                row.push(if calendar.holidays.contains(&date) { 1.0 } else { 0.0 });
            }
            row.push(match calendar.trend {
                TrendUnit::Days => d as f64,
                TrendUnit::Years => d as f64 / 365.25,
            });
            data.extend_from_slice(&row);
        }
        let x = DMatrix::from_row_slice(calendar.days, columns.len(), &data);
        Self::from_matrix(months.name(), columns, x)
    }

    /// A design from an explicit matrix whose first column is the intercept.
    pub fn from_matrix(encoding: &str, columns: Vec<String>, x: DMatrix<f64>) -> Result<Self> {
        if columns.len() != x.ncols() {
            return Err(Error::DimensionMismatch { expected: x.ncols(), got: columns.len() });
        }
        if x.nrows() == 0 || x.column(0).iter().any(|&v| v != 1.0) {
            return Err(invalid("the first design column must be the intercept"));
        }
        let design = Self { encoding: encoding.to_string(), columns, x };
        let collinear = design.collinear_columns();
        if !collinear.is_empty() {
            return Err(Error::RankDeficient { columns: collinear });
        }
        Ok(design)
    }

    pub fn encoding(&self) -> &str {
        &self.encoding
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn num_params(&self) -> usize {
        self.x.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.x.nrows()
    }

    /// Columns lying in the span of the columns before them.
    fn collinear_columns(&self) -> Vec<String> {
        let mut basis: Vec<DVector<f64>> = Vec::new();
        let mut out = Vec::new();
        for (j, name) in self.columns.iter().enumerate() {
            let mut v = self.x.column(j).into_owned();
            let norm0 = v.norm();
            for _ in 0..2 {
                for q in &basis {
                    let p = q.dot(&v);
                    v.axpy(-p, q, 1.0);
                }
            }
            let norm = v.norm();
            if norm0 == 0.0 || norm <= 1e-9 * norm0 {
                out.push(name.clone());
            } else {
                basis.push(v / norm);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub encoding: String,
    pub columns: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub deviance: f64,
    pub log_likelihood: f64,
    pub aic: f64,
    pub fitted: Vec<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl GlmFit {
    pub fn num_params(&self) -> usize {
        self.coefficients.len()
    }

    pub fn coefficient(&self, name: &str) -> Option<(f64, f64)> {
        self.columns.iter().position(|c| c == name).map(|i| (self.coefficients[i], self.std_errors[i]))
    }
}

const GLM_TOLERANCE: f64 = 1e-8;
const GLM_MAX_ITER: usize = 100;

fn poisson_deviance(y: &[u64], mu: &[f64]) -> f64 {
    2.0 * y
        .iter()
        .zip(mu)
        .map(|(&y, &m)| {
            let y = y as f64;
            let t = if y > 0.0 { y * (y / m).ln() } else { 0.0 };
            t - (y - m)
        })
        .sum::<f64>()
}

/// Maximum-likelihood Poisson regression with log link and `offset`, by
/// Newton (IRLS) steps with step halving on deviance increase.
pub fn fit_poisson_glm(counts: &[u64], offset: &[f64], design: &CalendarDesign) -> Result<GlmFit> {
    let n = design.num_rows();
    if counts.len() != n || offset.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: counts.len().min(offset.len()) });
    }
    if offset.iter().any(|o| !o.is_finite()) {
        return Err(invalid("offsets must be finite"));
    }
    let x = design.matrix();
    let p = design.num_params();
    let y = DVector::from_iterator(n, counts.iter().map(|&c| c as f64));
    let total: f64 = y.iter().sum();
    let exp_off: f64 = offset.iter().map(|o| o.exp()).sum();
    let mut beta = DVector::zeros(p);
    beta[0] = if total > 0.0 { (total / exp_off).ln() } else { -30.0 };
    let means = |b: &DVector<f64>| -> Vec<f64> {
        let eta = x * b;
        eta.iter().zip(offset).map(|(e, o)| (e + o).exp()).collect()
    };
    let mut mu = means(&beta);
    let mut dev = poisson_deviance(counts, &mu);
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    let mut info = DMatrix::zeros(p, p);
    for it in 0..=GLM_MAX_ITER {
        iterations = it;
        let resid = DVector::from_iterator(n, y.iter().zip(&mu).map(|(y, m)| y - m));
        let grad = x.tr_mul(&resid);
        grad_norm = grad.norm();
        let w = DVector::from_column_slice(&mu);
        let xw = DMatrix::from_fn(n, p, |i, j| x[(i, j)] * w[i]);
        info = x.tr_mul(&xw);
        if grad_norm < GLM_TOLERANCE || it == GLM_MAX_ITER {
            break;
        }
        let chol = info.clone().cholesky().ok_or_else(|| Error::Numeric("information matrix not positive definite".into()))?;
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let cand = &beta + &step * t;
            let cand_mu = means(&cand);
            let cand_dev = poisson_deviance(counts, &cand_mu);
            if cand_dev.is_finite() && cand_dev <= dev * (1.0 + 1e-15) + 1e-12 {
                beta = cand;
                mu = cand_mu;
                dev = cand_dev;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || step.amax() * t < 1e-15 * beta.amax().max(1.0) {
            break;
        }
    }
    if grad_norm >= GLM_TOLERANCE {
        log::debug!("GLM stopped at gradient norm {grad_norm:.3e} after {iterations} iterations");
    }
    let cov = info.cholesky().ok_or_else(|| Error::Numeric("information matrix not positive definite".into()))?.inverse();
    let std_errors = (0..p).map(|i| cov[(i, i)].sqrt()).collect();
    let log_likelihood: f64 = counts.iter().zip(&mu).map(|(&y, &m)| y as f64 * m.ln() - m - ln_factorial(y)).sum();
    Ok(GlmFit {
        encoding: design.encoding().to_string(),
        columns: design.columns().to_vec(),
        coefficients: beta.iter().copied().collect(),
        std_errors,
        deviance: dev,
        log_likelihood,
        aic: -2.0 * log_likelihood + 2.0 * p as f64,
        fitted: mu,
        iterations,
        gradient_norm: grad_norm,
    })
}

/// Fits every candidate and returns the index of the minimum-AIC design
/// (ties go to fewer parameters) with all fits.
pub fn select_month_encoding(counts: &[u64], offset: &[f64], candidates: &[CalendarDesign]) -> Result<(usize, Vec<GlmFit>)> {
    if candidates.len() < 2 {
        return Err(invalid("selection needs at least two candidate designs"));
    }
    let fits = candidates.iter().map(|d| fit_poisson_glm(counts, offset, d)).collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, f) in fits.iter().enumerate().skip(1) {
        let b = &fits[best];
        let tie = (f.aic - b.aic).abs() <= 1e-9 * b.aic.abs().max(1.0);
        if (tie && f.num_params() < b.num_params()) || (!tie && f.aic < b.aic) {
            best = i;
        }
    }
    Ok((best, fits))
}

/// `W(day) = policies(day) exp(x(day) a)` with the intercept left out.
pub fn build_exposure(policies: &[f64], fit: &GlmFit, design: &CalendarDesign) -> Result<Vec<f64>> {
    if policies.len() != design.num_rows() {
        return Err(Error::DimensionMismatch { expected: design.num_rows(), got: policies.len() });
    }
    if fit.columns != design.columns() {
        return Err(invalid("fit and design columns differ"));
    }
    if let Some(d) = policies.iter().position(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(invalid(format!("policy count on day {d} must be positive")));
    }
    let x = design.matrix();
    Ok(policies
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let lin: f64 = (1..fit.coefficients.len()).map(|j| x[(i, j)] * fit.coefficients[j]).sum();
            p * lin.exp()
        })
        .collect())
}

/// Pearson residuals of daily counts against GLM means.
pub fn glm_residuals(counts: &[u64], fit: &GlmFit) -> Vec<f64> {
    counts.iter().zip(&fit.fitted).map(|(&y, &m)| (y as f64 - m) / m.sqrt()).collect()
}
