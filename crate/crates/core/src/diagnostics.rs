//! Posterior mass summaries, residuals, empirical copulas, intensity
//! decomposition and forward prediction.

use rand::{Rng, RngCore};
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{invalid, Error, Result};
use crate::law::ShotLaw;
use crate::levy::{decompose_rates, mean_common_size, LevyCopula, Pattern};
use crate::likelihood::{draw_poisson, period_masses, CountsPanel, ExposureSeries};
use crate::rng::{self, streams};
use crate::shot::{decay_integral, DailyAccumulator, MarginalShotParams, Sizes, Trajectory};
use crate::stats;

/// Per-cell posterior mean and equal-tailed credible band of the
/// exposure-weighted period masses.
#[derive(Debug, Clone, PartialEq)]
pub struct MassSummary {
    pub mean: Vec<Vec<f64>>,
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
    pub level: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let (lo, frac) = (h.floor() as usize, h - h.floor());
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

pub fn mass_summary(
    samples: &[Trajectory],
    params: &[MarginalShotParams],
    exposure: &ExposureSeries,
    period_days: usize,
    num_periods: usize,
    level: f64,
) -> Result<MassSummary> {
    if samples.is_empty() {
        return Err(invalid("no posterior samples"));
    }
    if !(0.0..1.0).contains(&level) {
        return Err(invalid("credible level must lie in [0, 1)"));
    }
    let per: Vec<Vec<Vec<f64>>> =
        samples.par_iter().map(|t| period_masses(t, params, exposure, period_days, num_periods)).collect::<Result<_>>()?;
    let g = params.len();
    let k = per.len() as f64;
    let (mut mean, mut lower, mut upper) = (vec![vec![0.0; num_periods]; g], vec![vec![0.0; num_periods]; g], vec![vec![0.0; num_periods]; g]);
    let mut cell = Vec::with_capacity(per.len());
    for m in 0..g {
        for i in 0..num_periods {
            cell.clear();
            cell.extend(per.iter().map(|s| s[m][i]));
            mean[m][i] = cell.iter().sum::<f64>() / k;
            cell.sort_by(f64::total_cmp);
            lower[m][i] = quantile(&cell, (1.0 - level) / 2.0);
            upper[m][i] = quantile(&cell, (1.0 + level) / 2.0);
        }
    }
    Ok(MassSummary { mean, lower, upper, level })
}

/// `(N - M) / √M` per margin and period.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSeries {
    pub values: Vec<Vec<f64>>,
}

impl ResidualSeries {
    pub fn margin(&self, g: usize) -> &[f64] {
        &self.values[g]
    }
}

pub fn pearson_residuals(panel: &CountsPanel, masses: &[Vec<f64>]) -> Result<ResidualSeries> {
    if masses.len() != panel.dim() {
        return Err(Error::DimensionMismatch { expected: panel.dim(), got: masses.len() });
    }
    let mut values = Vec::with_capacity(panel.dim());
    for (g, row) in masses.iter().enumerate() {
        if row.len() != panel.num_periods() {
            return Err(Error::DimensionMismatch { expected: panel.num_periods(), got: row.len() });
        }
        let r = panel
            .margin(g)
            .iter()
            .zip(row)
            .enumerate()
            .map(|(i, (&n, &m))| {
                if m > 0.0 && m.is_finite() {
                    Ok((n as f64 - m) / m.sqrt())
                } else {
                    Err(Error::Undefined(format!("mass of margin {g}, period {i} is {m}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        values.push(r);
    }
    Ok(ResidualSeries { values })
}

/// `k × k` counts of rank-transformed pairs; `counts[i][j]` bins the first
/// series into `i` and the second into `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmpiricalCopulaGrid {
    pub k: usize,
    pub counts: Vec<Vec<u64>>,
}

impl EmpiricalCopulaGrid {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Cells whose `(O - E)² / E` exceeds the chi-square(1) quantile at a
    /// Bonferroni-adjusted level `alpha / k²`, with `E = n / k²`.
    pub fn independence_violations(&self, alpha: f64) -> Result<Vec<(usize, usize)>> {
        let cells = (self.k * self.k) as f64;
        let expected = self.total() as f64 / cells;
        let crit = ChiSquared::new(1.0).map_err(|e| Error::Numeric(e.to_string()))?.inverse_cdf(1.0 - alpha / cells);
        let mut out = Vec::new();
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &o) in row.iter().enumerate() {
                let d = o as f64 - expected;
                if d * d / expected > crit {
                    out.push((i, j));
                }
            }
        }
        Ok(out)
    }
}

pub fn empirical_copula(x: &[f64], y: &[f64], k: usize) -> Result<EmpiricalCopulaGrid> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    if k == 0 || x.len() < k {
        return Err(invalid(format!("need at least k = {k} > 0 observations, got {}", x.len())));
    }
    let n = x.len() as f64;
    let bin = |r: f64| (((r - 0.5) / n * k as f64) as usize).min(k - 1);
    let (rx, ry) = (stats::average_ranks(x), stats::average_ranks(y));
    let mut counts = vec![vec![0u64; k]; k];
    for (a, b) in rx.iter().zip(&ry) {
        counts[bin(*a)][bin(*b)] += 1;
    }
    Ok(EmpiricalCopulaGrid { k, counts })
}

/// Percentages of a margin's integrated intensity due to unique and common shots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub unique: f64,
    pub common: f64,
}

/// Share of each margin's expected shot inflow carried by common shots under
/// a Lévy-copula law.
pub fn common_inflow_share(marginals: &[MarginalShotParams; 2], copula: &dyn LevyCopula) -> Result<[f64; 2]> {
    let tails = [marginals[0].tail(), marginals[1].tail()];
    let dec = decompose_rates(copula, tails[0].rho, tails[1].rho)?;
    let mut out = [0.0; 2];
    for (g, o) in out.iter_mut().enumerate() {
        let total = marginals[g].rho / marginals[g].eta;
        *o = if dec.rho_common > 0.0 { (dec.rho_common * mean_common_size(&tails, copula, g)? / total).clamp(0.0, 1.0) } else { 0.0 };
    }
    Ok(out)
}

/// Splits each margin's integrated intensity over `[0, T]`, averaged over
/// `samples`, into unique-shot and common-shot parts. The initial-value term
/// is split by `initial_common_share`.
pub fn decompose_contributions(samples: &[Trajectory], kappa: &[f64], initial_common_share: &[f64]) -> Result<Vec<Contribution>> {
    let first = samples.first().ok_or_else(|| invalid("no posterior samples"))?;
    let g = first.dim();
    if kappa.len() != g || initial_common_share.len() != g {
        return Err(Error::DimensionMismatch { expected: g, got: kappa.len().min(initial_common_share.len()) });
    }
    let mut unique = vec![0.0; g];
    let mut common = vec![0.0; g];
    for t in samples {
        if t.dim() != g {
            return Err(Error::DimensionMismatch { expected: g, got: t.dim() });
        }
        let h = t.horizon();
        for m in 0..g {
            let init = t.initial_values()[m] * decay_integral(kappa[m], h);
            common[m] += init * initial_common_share[m];
            unique[m] += init * (1.0 - initial_common_share[m]);
        }
        for j in t.jumps() {
            let pattern = j.pattern()?;
            for m in 0..g {
                let x = j.sizes[m];
                if x > 0.0 {
                    let v = x * decay_integral(kappa[m], h - j.time);
                    if pattern == Pattern::Common {
                        common[m] += v;
                    } else {
                        unique[m] += v;
                    }
                }
            }
        }
    }
    (0..g)
        .map(|m| {
            let total = unique[m] + common[m];
            if total > 0.0 {
                Ok(Contribution { unique: 100.0 * unique[m] / total, common: 100.0 * common[m] / total })
            } else {
                Err(Error::Undefined(format!("margin {m} has zero integrated intensity")))
            }
        })
        .collect()
}

/// Exposure over the prediction horizon.
#[derive(Debug, Clone, PartialEq)]
pub enum ForwardExposure {
    /// One constant daily exposure per margin.
    Constant(Vec<f64>),
    /// Daily exposure per margin covering the horizon.
    Daily(Vec<Vec<f64>>),
}

impl ForwardExposure {
    /// The last observed day of `exposure`, held constant.
    pub fn last_observed(exposure: &ExposureSeries) -> Self {
        Self::Constant((0..exposure.dim()).map(|g| *exposure.margin(g).last().unwrap_or(&1.0)).collect())
    }

    fn dim(&self) -> usize {
        match self {
            Self::Constant(w) => w.len(),
            Self::Daily(w) => w.len(),
        }
    }
}

/// Outcome of one forward simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPath {
    pub totals: Vec<u64>,
    pub masses: Vec<f64>,
    pub terminal: Sizes,
}

/// Decays `initial`, adds new shots over `[0, horizon_days]`, weights by
/// exposure and draws Poisson totals per margin.
pub fn simulate_forward(
    law: &dyn ShotLaw,
    kappa: &[f64],
    initial: &[f64],
    exposure: &ForwardExposure,
    horizon_days: usize,
    rng: &mut dyn RngCore,
) -> Result<ForwardPath> {
    let g = law.dim();
    if kappa.len() != g || initial.len() != g || exposure.dim() != g {
        return Err(Error::DimensionMismatch { expected: g, got: kappa.len().min(initial.len()).min(exposure.dim()) });
    }
    let h = horizon_days as f64;
    let mut terminal: Sizes = (0..g).map(|m| initial[m] * (-kappa[m] * h).exp()).collect();
    let mut masses = match exposure {
        ForwardExposure::Constant(w) => {
            let mut masses: Vec<f64> = (0..g).map(|m| initial[m] * decay_integral(kappa[m], h)).collect();
            for (pattern, rate) in law.decomposition().patterns() {
                let n = draw_poisson(rate * h, rng)?;
                for _ in 0..n {
                    let tau = rng.random::<f64>() * h;
                    let sizes = law.sample_sizes(pattern, rng)?;
                    for m in 0..g {
                        let x = sizes[m];
                        if x > 0.0 {
                            let decay = (-kappa[m] * (h - tau)).exp();
                            masses[m] += x * (1.0 - decay) / kappa[m];
                            terminal[m] += x * decay;
                        }
                    }
                }
            }
            masses.iter_mut().zip(w).for_each(|(v, w)| *v *= w);
            masses
        }
        ForwardExposure::Daily(w) => {
            if w.iter().any(|row| row.len() < horizon_days) {
                return Err(Error::DimensionMismatch { expected: horizon_days, got: w.iter().map(Vec::len).min().unwrap_or(0) });
            }
            let mut acc: Vec<DailyAccumulator> = kappa.iter().map(|&k| DailyAccumulator::new(horizon_days, k)).collect();
            for (pattern, rate) in law.decomposition().patterns() {
                let n = draw_poisson(rate * h, rng)?;
                for _ in 0..n {
                    let tau = rng.random::<f64>() * h;
                    let sizes = law.sample_sizes(pattern, rng)?;
                    for m in 0..g {
                        if sizes[m] > 0.0 {
                            acc[m].add(tau, sizes[m]);
                            terminal[m] += sizes[m] * (-kappa[m] * (h - tau)).exp();
                        }
                    }
                }
            }
            acc.into_iter()
                .enumerate()
                .map(|(m, a)| a.finish(initial[m]).iter().zip(&w[m]).map(|(d, w)| d * w).sum())
                .collect()
        }
    };
    masses.iter_mut().for_each(|v| *v = v.max(0.0));
    let totals = masses.iter().map(|&m| draw_poisson(m, rng)).collect::<Result<_>>()?;
    Ok(ForwardPath { totals, masses, terminal })
}

/// Simulated count totals per margin over a horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// `totals[g][s]` for margin `g` and simulation `s`.
    pub totals: Vec<Vec<u64>>,
    pub initial: Sizes,
    pub horizon_days: usize,
    pub seed: u64,
}

/// `n_sims` independent forward simulations; simulation `s` draws from its
/// own random stream, so results do not depend on scheduling.
pub fn predict(
    law: &dyn ShotLaw,
    params: &[MarginalShotParams],
    initial: &[f64],
    exposure: &ForwardExposure,
    horizon_days: usize,
    n_sims: usize,
    seed: u64,
) -> Result<PredictionSet> {
    if horizon_days == 0 {
        return Err(invalid("prediction horizon must be positive"));
    }
    let kappa: Vec<f64> = params.iter().map(|p| p.kappa).collect();
    let paths: Vec<Vec<u64>> = (0..n_sims)
        .into_par_iter()
        .map(|s| {
            let mut r = rng::stream(seed, streams::PREDICTION_BASE + s as u64);
            simulate_forward(law, &kappa, initial, exposure, horizon_days, &mut r).map(|p| p.totals)
        })
        .collect::<Result<_>>()?;
    let totals = (0..law.dim()).map(|g| paths.iter().map(|p| p[g]).collect()).collect();
    Ok(PredictionSet { totals, initial: initial.iter().copied().collect(), horizon_days, seed })
}

/// Expected total count of one margin over `horizon` days from intensity
/// `initial` under constant exposure `w`.
pub fn expected_total(p: &MarginalShotParams, initial: f64, w: f64, horizon: f64) -> f64 {
    let decayed = decay_integral(p.kappa, horizon);
    w * (initial * decayed + p.rho / p.eta * (horizon - decayed) / p.kappa)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DependencyMeasures {
    pub pearson: f64,
    pub kendall: f64,
    pub spearman: f64,
}

pub fn dependency_measures(pred: &PredictionSet) -> Result<DependencyMeasures> {
    if pred.totals.len() != 2 {
        return Err(Error::UnimplementedDimension(pred.totals.len()));
    }
    let x: Vec<f64> = pred.totals[0].iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = pred.totals[1].iter().map(|&v| v as f64).collect();
    Ok(DependencyMeasures { pearson: stats::pearson(&x, &y)?, kendall: stats::kendall_tau(&x, &y)?, spearman: stats::spearman(&x, &y)? })
}
