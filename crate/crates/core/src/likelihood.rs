//! Observed count panels, daily exposure, and the two log-likelihoods of the
//! model: the Poisson likelihood of counts given a trajectory and the prior
//! of the trajectory itself.

use rand::RngCore;
use rand_distr::{Distribution, Poisson};
use statrs::function::factorial::ln_factorial;

use crate::error::{invalid, Error, Result};
use crate::law::ShotLaw;
use crate::numeric::KahanSum;
use crate::shot::{MarginalShotParams, Trajectory};

/// Per-period claim counts, `counts[g][i]`, over periods of `period_days` days.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountsPanel {
    counts: Vec<Vec<u64>>,
    period_days: usize,
}

impl CountsPanel {
    pub fn new(counts: Vec<Vec<u64>>, period_days: usize) -> Result<Self> {
        if counts.is_empty() {
            return Err(invalid("panel needs at least one margin"));
        }
        if period_days == 0 {
            return Err(invalid("period length must be at least one day"));
        }
        let l = counts[0].len();
        if l == 0 {
            return Err(invalid("panel needs at least one period"));
        }
        if let Some(row) = counts.iter().find(|r| r.len() != l) {
            return Err(Error::DimensionMismatch { expected: l, got: row.len() });
        }
        Ok(Self { counts, period_days })
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn num_periods(&self) -> usize {
        self.counts[0].len()
    }

    pub fn period_days(&self) -> usize {
        self.period_days
    }

    pub fn num_days(&self) -> usize {
        self.num_periods() * self.period_days
    }

    pub fn horizon(&self) -> f64 {
        self.num_days() as f64
    }

    pub fn margin(&self, g: usize) -> &[u64] {
        &self.counts[g]
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, g: usize, i: usize) -> u64 {
        self.counts[g][i]
    }

    /// Keeps the listed margins, in order.
    pub fn select(&self, margins: &[usize]) -> Result<Self> {
        let counts = margins
            .iter()
            .map(|&g| self.counts.get(g).cloned().ok_or(Error::OutOfRange { index: g, len: self.dim() }))
            .collect::<Result<_>>()?;
        Self::new(counts, self.period_days)
    }
}

/// Daily piecewise-constant exposure, `values[g][d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureSeries {
    values: Vec<Vec<f64>>,
}

impl ExposureSeries {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        if values.is_empty() || values[0].is_empty() {
            return Err(invalid("exposure needs at least one margin and one day"));
        }
        let days = values[0].len();
        for row in &values {
            if row.len() != days {
                return Err(Error::DimensionMismatch { expected: days, got: row.len() });
            }
            if let Some(v) = row.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
                return Err(invalid(format!("exposure must be strictly positive, got {v}")));
            }
        }
        Ok(Self { values })
    }

    /// Constant exposure `w` on every day.
    pub fn constant(dim: usize, days: usize, w: f64) -> Result<Self> {
        Self::new(vec![vec![w; days]; dim])
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn num_days(&self) -> usize {
        self.values[0].len()
    }

    pub fn margin(&self, g: usize) -> &[f64] {
        &self.values[g]
    }

    pub fn select(&self, margins: &[usize]) -> Result<Self> {
        let values = margins
            .iter()
            .map(|&g| self.values.get(g).cloned().ok_or(Error::OutOfRange { index: g, len: self.dim() }))
            .collect::<Result<_>>()?;
        Self::new(values)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.values.iter().map(|r| r.iter().map(|v| v * c).collect()).collect())
    }
}

fn check_shapes(traj: &Trajectory, params: &[MarginalShotParams], exposure: &ExposureSeries, days: usize) -> Result<()> {
    let g = traj.dim();
    if params.len() != g {
        return Err(Error::DimensionMismatch { expected: g, got: params.len() });
    }
    if exposure.dim() != g {
        return Err(Error::DimensionMismatch { expected: g, got: exposure.dim() });
    }
    if exposure.num_days() < days {
        return Err(Error::DimensionMismatch { expected: days, got: exposure.num_days() });
    }
    if traj.horizon() < days as f64 {
        return Err(invalid(format!("trajectory horizon {} shorter than {days} days", traj.horizon())));
    }
    Ok(())
}

/// `Σ_d W_g(d) ∫_d λ̃_g` over the days of one period.
pub fn exposure_weighted_mass(
    traj: &Trajectory,
    params: &[MarginalShotParams],
    exposure: &ExposureSeries,
    margin: usize,
    period_days: usize,
    period: usize,
) -> Result<f64> {
    if margin >= traj.dim() {
        return Err(Error::OutOfRange { index: margin, len: traj.dim() });
    }
    let days = exposure.num_days().min(traj.horizon().floor() as usize);
    let periods = days / period_days.max(1);
    if period >= periods {
        return Err(Error::OutOfRange { index: period, len: periods });
    }
    let kappa = params.get(margin).ok_or(Error::DimensionMismatch { expected: traj.dim(), got: params.len() })?.kappa;
    let w = exposure.margin(margin);
    let mut total = 0.0;
    for d in period * period_days..(period + 1) * period_days {
        total += w[d] * traj.integrated_intensity(margin, d as f64, d as f64 + 1.0, kappa)?;
    }
    Ok(total)
}

/// All period masses `M[g][i]` in one pass per margin.
pub fn period_masses(
    traj: &Trajectory,
    params: &[MarginalShotParams],
    exposure: &ExposureSeries,
    period_days: usize,
    num_periods: usize,
) -> Result<Vec<Vec<f64>>> {
    let days = period_days * num_periods;
    check_shapes(traj, params, exposure, days)?;
    (0..traj.dim())
        .map(|g| {
            let daily = traj.daily_integrals(g, params[g].kappa, days)?;
            Ok(weight_and_bin(&daily, exposure.margin(g), period_days))
        })
        .collect()
}

/// Exposure-weights daily integrals and sums them per period.
pub fn weight_and_bin(daily: &[f64], weights: &[f64], period_days: usize) -> Vec<f64> {
    daily
        .chunks(period_days)
        .enumerate()
        .map(|(i, chunk)| chunk.iter().enumerate().map(|(k, v)| v * weights[i * period_days + k]).sum())
        .collect()
}

/// Log Poisson probability of `n` events with mean `mass`.
pub fn poisson_count_logprob(n: u64, mass: f64) -> f64 {
    if mass <= 0.0 {
        return if n == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    n as f64 * mass.ln() - mass - ln_factorial(n)
}

/// Log-likelihood of the counts given the trajectory, including the
/// `-ln N!` terms.
pub fn log_conditional(
    panel: &CountsPanel,
    traj: &Trajectory,
    params: &[MarginalShotParams],
    exposure: &ExposureSeries,
) -> Result<f64> {
    if panel.dim() != traj.dim() {
        return Err(Error::DimensionMismatch { expected: panel.dim(), got: traj.dim() });
    }
    let masses = period_masses(traj, params, exposure, panel.period_days(), panel.num_periods())?;
    Ok(sum_logprob(panel, &masses))
}

/// `Σ poisson_count_logprob(N[g][i], M[g][i])` with compensated summation.
pub fn sum_logprob(panel: &CountsPanel, masses: &[Vec<f64>]) -> f64 {
    let mut acc = KahanSum::default();
    for (g, row) in masses.iter().enumerate() {
        for (i, &m) in row.iter().enumerate() {
            acc.add(poisson_count_logprob(panel.get(g, i), m));
        }
    }
    acc.value()
}

/// Log prior density of a trajectory: marked Poisson shots at the total
/// rate plus independent stationary Gamma initial values.
pub fn log_prior(traj: &Trajectory, params: &[MarginalShotParams], law: &dyn ShotLaw) -> Result<f64> {
    if params.len() != traj.dim() {
        return Err(Error::DimensionMismatch { expected: traj.dim(), got: params.len() });
    }
    if law.dim() != traj.dim() {
        return Err(Error::DimensionMismatch { expected: traj.dim(), got: law.dim() });
    }
    let rho = law.total_rate();
    let mut acc = KahanSum::default();
    acc.add(traj.len() as f64 * rho.ln() - rho * traj.horizon());
    for j in traj.jumps() {
        acc.add(law.log_density(&j.sizes)?);
    }
    for (p, &x) in params.iter().zip(traj.initial_values()) {
        acc.add(p.stationary_log_density(x));
    }
    Ok(acc.value())
}

/// Draws `N[g][i] ~ Poisson(M[g][i])` independently.
pub fn simulate_counts(
    traj: &Trajectory,
    params: &[MarginalShotParams],
    exposure: &ExposureSeries,
    period_days: usize,
    num_periods: usize,
    rng: &mut dyn RngCore,
) -> Result<CountsPanel> {
    let masses = period_masses(traj, params, exposure, period_days, num_periods)?;
    let counts = masses
        .iter()
        .map(|row| row.iter().map(|&m| draw_poisson(m, rng)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    CountsPanel::new(counts, period_days)
}

/// Poisson draw that accepts a zero mean.
pub fn draw_poisson(mean: f64, rng: &mut dyn RngCore) -> Result<u64> {
    if mean <= 0.0 {
        return Ok(0);
    }
    Ok(Poisson::new(mean).map_err(|e| Error::Numeric(e.to_string()))?.sample(rng) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::law::ExponentialShots;
    use crate::shot::{JumpEvent, Sizes};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use smallvec::smallvec;

    fn flat(lambda0: f64, horizon: f64) -> Trajectory {
        Trajectory::new(smallvec![lambda0] as Sizes, vec![], horizon).unwrap()
    }

    #[test]
    fn poisson_logprob_examples() {
        assert!((poisson_count_logprob(0, 2.0).exp() - 0.135335).abs() < 1e-6);
        assert!((poisson_count_logprob(2, 1.0).exp() - 0.183940).abs() < 1e-6);
        assert!((poisson_count_logprob(3, 2.5).exp() - 0.213763).abs() < 1e-6);
        assert_eq!(poisson_count_logprob(0, 0.0), 0.0);
        assert_eq!(poisson_count_logprob(1, 0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn mass_examples() {
        let p = [MarginalShotParams::new(1.0, 1.0, 1.0).unwrap()];
        let tr = flat(1.0, 2.0);
        let w2 = ExposureSeries::constant(1, 2, 2.0).unwrap();
        let m = exposure_weighted_mass(&tr, &p, &w2, 0, 1, 0).unwrap();
        assert!((m - 1.264241).abs() < 1e-6);
        let w = ExposureSeries::new(vec![vec![1.0, 2.0]]).unwrap();
        let m = exposure_weighted_mass(&tr, &p, &w, 0, 2, 0).unwrap();
        let e1 = (-1f64).exp();
        assert!((m - ((1.0 - e1) + 2.0 * e1 * (1.0 - e1))).abs() < 1e-14);
        assert!(exposure_weighted_mass(&tr, &p, &w, 0, 2, 1).is_err());
    }

    #[test]
    fn conditional_examples() {
        let p = [MarginalShotParams::new(1.0, 1.0, 1.0).unwrap()];
        let tr = flat(1.0, 3.0);
        let w = ExposureSeries::constant(1, 3, 1.0).unwrap();
        let panel = CountsPanel::new(vec![vec![0, 0, 0]], 1).unwrap();
        let masses = period_masses(&tr, &p, &w, 1, 3).unwrap();
        let ll = log_conditional(&panel, &tr, &p, &w).unwrap();
        assert!((ll + masses[0].iter().sum::<f64>()).abs() < 1e-14);
    }

    #[test]
    fn prior_example() {
        let p = [MarginalShotParams::new(1.0, 1.0, 1.0).unwrap()];
        let law = ExponentialShots::new(1.0, 1.0).unwrap();
        let tr = flat(1.0, 1.0);
        assert!((log_prior(&tr, &p, &law).unwrap() + 2.0).abs() < 1e-14);
        let mut tr2 = tr.clone();
        tr2.insert(JumpEvent::new(0.4, smallvec![0.7] as Sizes).unwrap()).unwrap();
        let diff = log_prior(&tr2, &p, &law).unwrap() - log_prior(&tr, &p, &law).unwrap();
        assert!((diff - (0.0 + law.log_density(&[0.7]).unwrap())).abs() < 1e-14);
    }

    #[test]
    fn zero_trajectory_gives_zero_counts() {
        let p = [MarginalShotParams::new(1.0, 1.0, 1.0).unwrap()];
        let tr = flat(0.0, 10.0);
        let w = ExposureSeries::constant(1, 10, 5.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let panel = simulate_counts(&tr, &p, &w, 1, 10, &mut rng).unwrap();
        assert!(panel.margin(0).iter().all(|&n| n == 0));
    }

    #[test]
    fn panel_validation() {
        assert!(CountsPanel::new(vec![vec![1, 2], vec![3]], 1).is_err());
        assert!(CountsPanel::new(vec![vec![1]], 0).is_err());
        assert!(ExposureSeries::new(vec![vec![1.0, 0.0]]).is_err());
    }
}
