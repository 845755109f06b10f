//! Multivariate shot-noise intensities: parameters, trajectories, exact
//! intensity integrals and simulation.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Gamma, Poisson};
use smallvec::SmallVec;

use crate::error::{invalid, Error, Result};
use crate::law::{Pattern, ShotLaw};
use crate::levy::MarginalTail;

/// Per-margin jump vector (one entry per margin).
pub type Sizes = SmallVec<[f64; 2]>;

/// Shot-noise triple of one margin: shot arrival rate, inverse mean jump
/// size and exponential decay rate (all per day).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalShotParams {
    pub rho: f64,
    pub eta: f64,
    pub kappa: f64,
}

impl MarginalShotParams {
    pub fn new(rho: f64, eta: f64, kappa: f64) -> Result<Self> {
        let p = Self { rho, eta, kappa };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rho", self.rho), ("eta", self.eta), ("kappa", self.kappa)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    /// Gamma shape of the stationary intensity, `rho / kappa`.
    pub fn stationary_shape(&self) -> f64 {
        self.rho / self.kappa
    }

    /// Stationary mean `rho / (kappa eta)`.
    pub fn stationary_mean(&self) -> f64 {
        self.rho / (self.kappa * self.eta)
    }

    /// Stationary variance `rho / (kappa eta^2)` (Gamma shape over rate squared).
    pub fn stationary_variance(&self) -> f64 {
        self.rho / (self.kappa * self.eta * self.eta)
    }

    pub fn tail(&self) -> MarginalTail {
        MarginalTail { rho: self.rho, eta: self.eta }
    }

    /// Gamma log-density of an initial intensity under the stationary law.
    pub fn stationary_log_density(&self, x: f64) -> f64 {
        let shape = self.stationary_shape();
        if x <= 0.0 {
            return if shape < 1.0 {
                f64::INFINITY
            } else if shape == 1.0 {
                self.eta.ln()
            } else {
                f64::NEG_INFINITY
            };
        }
        (shape - 1.0) * x.ln() - self.eta * x + shape * self.eta.ln() - statrs::function::gamma::ln_gamma(shape)
    }
}

/// A timed multivariate shot; zero entries mark unaffected margins.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpEvent {
    pub time: f64,
    pub sizes: Sizes,
}

impl JumpEvent {
    pub fn new(time: f64, sizes: impl Into<Sizes>) -> Result<Self> {
        let sizes = sizes.into();
        if !(time >= 0.0 && time.is_finite()) {
            return Err(invalid(format!("jump time must be finite and non-negative, got {time}")));
        }
        if sizes.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(invalid("jump sizes must be finite and non-negative"));
        }
        if sizes.iter().all(|&x| x == 0.0) {
            return Err(invalid("a jump must move at least one margin"));
        }
        Ok(Self { time, sizes })
    }

    pub fn pattern(&self) -> Result<Pattern> {
        Pattern::of(&self.sizes)
    }
}

/// Latent path of a multivariate shot-noise intensity on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    initial_values: Sizes,
    jumps: Vec<JumpEvent>,
    horizon: f64,
}

impl Trajectory {
    /// Builds a trajectory; `jumps` must be ordered in time.
    pub fn new(initial_values: impl Into<Sizes>, jumps: Vec<JumpEvent>, horizon: f64) -> Result<Self> {
        let initial_values = initial_values.into();
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid(format!("horizon must be positive, got {horizon}")));
        }
        if initial_values.is_empty() {
            return Err(invalid("trajectory needs at least one margin"));
        }
        if initial_values.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(invalid("initial intensities must be finite and non-negative"));
        }
        let g = initial_values.len();
        for j in &jumps {
            if j.sizes.len() != g {
                return Err(Error::DimensionMismatch { expected: g, got: j.sizes.len() });
            }
            if j.time > horizon {
                return Err(invalid(format!("jump at {} beyond horizon {horizon}", j.time)));
            }
        }
        if jumps.windows(2).any(|w| w[1].time < w[0].time) {
            return Err(invalid("jumps must be ordered in time"));
        }
        Ok(Self { initial_values, jumps, horizon })
    }

    /// Builds a trajectory from jumps in any order (stable in ties).
    pub fn from_unsorted(initial_values: impl Into<Sizes>, mut jumps: Vec<JumpEvent>, horizon: f64) -> Result<Self> {
        jumps.sort_by(|a, b| a.time.total_cmp(&b.time));
        Self::new(initial_values, jumps, horizon)
    }

    pub fn dim(&self) -> usize {
        self.initial_values.len()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn initial_values(&self) -> &[f64] {
        &self.initial_values
    }

    pub fn jumps(&self) -> &[JumpEvent] {
        &self.jumps
    }

    pub fn len(&self) -> usize {
        self.jumps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jumps.is_empty()
    }

    pub fn set_initial_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: values.len() });
        }
        self.initial_values = values.iter().copied().collect();
        Ok(())
    }

    /// Inserts a jump after any existing jumps at the same time; returns its index.
    pub fn insert(&mut self, jump: JumpEvent) -> Result<usize> {
        if jump.sizes.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: jump.sizes.len() });
        }
        if jump.time > self.horizon {
            return Err(invalid("jump beyond horizon"));
        }
        let idx = self.jumps.partition_point(|j| j.time <= jump.time);
        self.jumps.insert(idx, jump);
        Ok(idx)
    }

    pub fn remove(&mut self, index: usize) -> Result<JumpEvent> {
        if index >= self.jumps.len() {
            return Err(Error::OutOfRange { index, len: self.jumps.len() });
        }
        Ok(self.jumps.remove(index))
    }

    fn check_margin(&self, margin: usize) -> Result<()> {
        if margin >= self.dim() {
            return Err(Error::OutOfRange { index: margin, len: self.dim() });
        }
        Ok(())
    }

    /// Right-continuous intensity of `margin` at time `t`.
    pub fn intensity_at(&self, margin: usize, t: f64, kappa: f64) -> Result<f64> {
        self.check_margin(margin)?;
        if !(0.0..=self.horizon).contains(&t) {
            return Err(invalid(format!("time {t} outside [0, {}]", self.horizon)));
        }
        let end = self.jumps.partition_point(|j| j.time <= t);
        let mut value = self.initial_values[margin] * (-kappa * t).exp();
        for j in &self.jumps[..end] {
            let x = j.sizes[margin];
            if x > 0.0 {
                value += x * (-kappa * (t - j.time)).exp();
            }
        }
        Ok(value)
    }

    /// Exact `∫_{t0}^{t1}` of the intensity of `margin`.
    pub fn integrated_intensity(&self, margin: usize, t0: f64, t1: f64, kappa: f64) -> Result<f64> {
        self.check_margin(margin)?;
        if t0 > t1 {
            return Err(invalid(format!("interval start {t0} after end {t1}")));
        }
        if t0 < 0.0 || t1 > self.horizon {
            return Err(invalid(format!("interval [{t0}, {t1}] outside [0, {}]", self.horizon)));
        }
        if t0 == t1 {
            return Ok(0.0);
        }
        let start = self.intensity_at(margin, t0, kappa)?;
        let mut total = start * decay_integral(kappa, t1 - t0);
        let first = self.jumps.partition_point(|j| j.time <= t0);
        for j in &self.jumps[first..] {
            if j.time > t1 {
                break;
            }
            let x = j.sizes[margin];
            if x > 0.0 {
                total += x * decay_integral(kappa, t1 - j.time);
            }
        }
        Ok(total)
    }

    /// Integrals of the intensity of `margin` over the unit days
    /// `(d, d+1]`, `d = 0..days`, in one pass.
    pub fn daily_integrals(&self, margin: usize, kappa: f64, days: usize) -> Result<Vec<f64>> {
        self.check_margin(margin)?;
        let mut acc = DailyAccumulator::new(days, kappa);
        for j in &self.jumps {
            acc.add(j.time, j.sizes[margin]);
        }
        Ok(acc.finish(self.initial_values[margin]))
    }

    /// Intensities of all margins at the horizon.
    pub fn terminal_intensity(&self, kappa: &[f64]) -> Result<Sizes> {
        if kappa.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: kappa.len() });
        }
        (0..self.dim()).map(|g| self.intensity_at(g, self.horizon, kappa[g])).collect()
    }
}

/// `∫_0^len e^{-κ s} ds`.
#[inline]
pub fn decay_integral(kappa: f64, len: f64) -> f64 {
    -(-kappa * len).exp_m1() / kappa
}

/// Accumulates shots into per-day integrals with an `O(jumps + days)` sweep.
#[derive(Debug, Clone)]
pub struct DailyAccumulator {
    kappa: f64,
    within: Vec<f64>,
    carry: Vec<f64>,
}

impl DailyAccumulator {
    pub fn new(days: usize, kappa: f64) -> Self {
        Self { kappa, within: vec![0.0; days], carry: vec![0.0; days] }
    }

    pub fn add(&mut self, time: f64, size: f64) {
        let days = self.within.len();
        if size <= 0.0 || days == 0 {
            return;
        }
        let d = (time as usize).min(days - 1);
        let rest = (d as f64 + 1.0 - time).max(0.0);
        let decay = (-self.kappa * rest).exp();
        self.within[d] += size * (1.0 - decay) / self.kappa;
        self.carry[d] += size * decay;
    }

    pub fn finish(self, initial: f64) -> Vec<f64> {
        let one_day = decay_integral(self.kappa, 1.0);
        let step = (-self.kappa).exp();
        let mut level = initial;
        self.within
            .iter()
            .zip(&self.carry)
            .map(|(&w, &c)| {
                let v = level * one_day + w;
                level = level * step + c;
                v
            })
            .collect()
    }
}

/// Draw from the stationary Gamma(rho/kappa, eta) law of a margin.
pub fn sample_stationary_initial<R: Rng + ?Sized>(p: &MarginalShotParams, rng: &mut R) -> Result<f64> {
    p.validate()?;
    let gamma = Gamma::new(p.stationary_shape(), 1.0 / p.eta).map_err(|e| invalid(e.to_string()))?;
    loop {
        let x: f64 = gamma.sample(rng);
        if x > 0.0 {
            return Ok(x);
        }
    }
}

fn check_law(params: &[MarginalShotParams], law: &dyn ShotLaw) -> Result<()> {
    if law.dim() != params.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), got: law.dim() });
    }
    let dec = law.decomposition();
    for (g, p) in params.iter().enumerate() {
        p.validate()?;
        let rate = dec.marginal_rate(g);
        if (rate - p.rho).abs() > 1e-9 * p.rho.max(1.0) {
            return Err(Error::Config(format!(
                "shot law gives margin {g} a rate of {rate}, parameters say {}",
                p.rho
            )));
        }
    }
    Ok(())
}

/// Simulates shots of every pattern stream on `[0, horizon]` and merges them
/// into one time-ordered list.
pub fn simulate_jumps(law: &dyn ShotLaw, horizon: f64, rng: &mut dyn RngCore) -> Result<Vec<JumpEvent>> {
    let dec = law.decomposition();
    let mut jumps = Vec::new();
    for (pattern, rate) in dec.patterns() {
        if rate <= 0.0 {
            continue;
        }
        let count = Poisson::new(rate * horizon).map_err(|e| invalid(e.to_string()))?.sample(rng) as usize;
        for _ in 0..count {
            let time = rng.random::<f64>() * horizon;
            let sizes = law.sample_sizes(pattern, rng)?;
            jumps.push(JumpEvent { time, sizes });
        }
    }
    jumps.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(jumps)
}

/// Simulates a stationary-start trajectory: initial values from the marginal
/// Gamma laws and shots from `law`.
pub fn simulate_trajectory(
    params: &[MarginalShotParams],
    law: &dyn ShotLaw,
    horizon: f64,
    rng: &mut dyn RngCore,
) -> Result<Trajectory> {
    check_law(params, law)?;
    let initial: Sizes = params.iter().map(|p| sample_stationary_initial(p, rng)).collect::<Result<_>>()?;
    let jumps = simulate_jumps(law, horizon, rng)?;
    Trajectory::new(initial, jumps, horizon)
}

/// Continues a path from known intensities over `[0, horizon]`.
pub fn simulate_from(initial: &[f64], law: &dyn ShotLaw, horizon: f64, rng: &mut dyn RngCore) -> Result<Trajectory> {
    if initial.len() != law.dim() {
        return Err(Error::DimensionMismatch { expected: law.dim(), got: initial.len() });
    }
    let jumps = simulate_jumps(law, horizon, rng)?;
    Trajectory::new(initial.iter().copied().collect::<Sizes>(), jumps, horizon)
}

/// Stationary cross-covariance of two shot-noise margins driven by common
/// shots at rate `rho_common`: `rho_common E[X1 X2] / (kappa1 + kappa2)`.
pub fn theoretical_cov(rho_common: f64, mean_cross_product: f64, kappa1: f64, kappa2: f64) -> f64 {
    rho_common * mean_cross_product / (kappa1 + kappa2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::law::{CommonShockShots, ExponentialShots};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use smallvec::smallvec;

    fn one_margin(lambda0: f64, jumps: &[(f64, f64)], horizon: f64) -> Trajectory {
        let jumps = jumps.iter().map(|&(t, x)| JumpEvent::new(t, smallvec![x] as Sizes).unwrap()).collect();
        Trajectory::new(smallvec![lambda0] as Sizes, jumps, horizon).unwrap()
    }

    #[test]
    fn intensity_examples() {
        let ln2 = std::f64::consts::LN_2;
        let tr = one_margin(2.0, &[], 2.0);
        assert!((tr.intensity_at(0, 1.0, ln2).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(tr.intensity_at(0, 0.0, 3.0).unwrap(), 2.0);
        let tr = one_margin(2.0, &[(0.5, 1.0)], 2.0);
        let v = tr.intensity_at(0, 1.0, ln2).unwrap();
        assert!((v - (1.0 + 2f64.powf(-0.5))).abs() < 1e-12);
        assert!((v - 1.70711).abs() < 1e-5);
    }

    #[test]
    fn intensity_errors() {
        let tr = one_margin(1.0, &[], 1.0);
        assert!(tr.intensity_at(0, 1.5, 1.0).is_err());
        assert!(tr.intensity_at(1, 0.5, 1.0).is_err());
        assert!(tr.integrated_intensity(0, 0.6, 0.5, 1.0).is_err());
    }

    #[test]
    fn right_continuous_at_jump() {
        let tr = one_margin(1.0, &[(0.5, 2.0)], 1.0);
        let at = tr.intensity_at(0, 0.5, 1.0).unwrap();
        assert!((at - ((-0.5f64).exp() + 2.0)).abs() < 1e-14);
    }

    #[test]
    fn integral_examples() {
        let tr = one_margin(1.0, &[], 1.0);
        let v = tr.integrated_intensity(0, 0.0, 1.0, 1.0).unwrap();
        assert!((v - (1.0 - (-1f64).exp())).abs() < 1e-15);
        assert!((v - 0.632121).abs() < 1e-6);
        let tr = one_margin(1.0, &[(0.5, 1.0)], 1.0);
        let v = tr.integrated_intensity(0, 0.0, 1.0, 1.0).unwrap();
        assert!((v - (1.0 - (-1f64).exp()) - (1.0 - (-0.5f64).exp())).abs() < 1e-15);
        assert!((v - 1.025586).abs() < 1e-5);
        assert_eq!(tr.integrated_intensity(0, 0.3, 0.3, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn daily_integrals_match_interval_integrals() {
        let tr = one_margin(3.0, &[(0.0, 1.0), (0.25, 2.0), (1.0, 0.5), (2.7, 4.0), (4.0, 1.0)], 4.0);
        let daily = tr.daily_integrals(0, 0.8, 4).unwrap();
        for (d, v) in daily.iter().enumerate() {
            let direct = tr.integrated_intensity(0, d as f64, d as f64 + 1.0, 0.8).unwrap();
            assert!((v - direct).abs() < 1e-12 * direct.max(1.0), "day {d}: {v} vs {direct}");
        }
    }

    #[test]
    fn insertion_keeps_order_and_ties_by_arrival() {
        let mut tr = one_margin(1.0, &[(0.2, 1.0), (0.8, 1.0)], 1.0);
        let i = tr.insert(JumpEvent::new(0.5, smallvec![3.0] as Sizes).unwrap()).unwrap();
        assert_eq!(i, 1);
        let k = tr.insert(JumpEvent::new(0.5, smallvec![4.0] as Sizes).unwrap()).unwrap();
        assert_eq!(k, 2);
        assert_eq!(tr.jumps()[2].sizes[0], 4.0);
        let removed = tr.remove(1).unwrap();
        assert_eq!(removed.sizes[0], 3.0);
    }

    #[test]
    fn jump_validation() {
        assert!(JumpEvent::new(0.1, smallvec![0.0, 0.0] as Sizes).is_err());
        assert!(JumpEvent::new(-1.0, smallvec![1.0] as Sizes).is_err());
        assert!(JumpEvent::new(0.1, smallvec![-1.0, 1.0] as Sizes).is_err());
    }

    #[test]
    fn stationary_sampler_mean() {
        let p = MarginalShotParams::new(2.0, 1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let mean = (0..n).map(|_| sample_stationary_initial(&p, &mut rng).unwrap()).sum::<f64>() / n as f64;
        let se = (p.stationary_variance() / n as f64).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * se, "{mean}");
    }

    #[test]
    fn nsw_stationary_mean() {
        let p = MarginalShotParams::new(33.77, 0.17, 2.37).unwrap();
        assert!((p.stationary_mean() - 83.82).abs() < 0.01);
    }

    #[test]
    fn only_common_shots_hit_both_margins() {
        let law = CommonShockShots::new([0.0, 0.0], 2.0, [1.0, 1.0], [1.0, 1.0]).unwrap();
        let params = [MarginalShotParams::new(2.0, 1.0, 1.0).unwrap(), MarginalShotParams::new(2.0, 1.0, 2.0).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tr = simulate_trajectory(&params, &law, 500.0, &mut rng).unwrap();
        assert!(!tr.is_empty());
        assert!(tr.jumps().iter().all(|j| j.sizes.iter().all(|&x| x > 0.0)));
    }

    #[test]
    fn inconsistent_rates_rejected() {
        let law = ExponentialShots::new(2.0, 1.0).unwrap();
        let params = [MarginalShotParams::new(3.0, 1.0, 1.0).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(simulate_trajectory(&params, &law, 10.0, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn theoretical_cov_examples() {
        assert_eq!(theoretical_cov(1.0, 1.0, 1.0, 1.0), 0.5);
        assert_eq!(theoretical_cov(0.0, 7.0, 1.0, 3.0), 0.0);
    }
}
