//! Shot-size laws: the joint distribution of a shot's size vector together
//! with the arrival rates of each zero pattern.

use std::fmt::Debug;

use rand::distr::Open01;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp, Exp1};
use smallvec::smallvec;

use crate::error::{invalid, Error, Result};
pub use crate::levy::Pattern;
use crate::levy::{
    common_jump_from_logs, decompose_rates, ln_common_jump_rate_density, ln_unique_jump_rate_density, Decomposition,
    LevyCopula, MarginalTail,
};
use crate::numeric::{bisect, log1m_exp};
use crate::shot::Sizes;

/// Joint law of shot sizes and pattern rates.
pub trait ShotLaw: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn dim(&self) -> usize;

    fn decomposition(&self) -> &Decomposition;

    /// Arrival rate of the driving shot process.
    fn total_rate(&self) -> f64 {
        self.decomposition().total_rate()
    }

    /// Sizes of a shot conditional on its pattern.
    fn sample_sizes(&self, pattern: Pattern, rng: &mut dyn RngCore) -> Result<Sizes>;

    /// Log-density of a size vector under the pattern mixture.
    fn log_density(&self, sizes: &[f64]) -> Result<f64>;

    /// Draws a pattern in proportion to its rate, then sizes.
    fn sample(&self, rng: &mut dyn RngCore) -> Result<Sizes> {
        let dec = self.decomposition();
        let total = dec.total_rate();
        let mut pick = rng.random::<f64>() * total;
        let patterns = dec.patterns();
        let mut chosen = patterns.last().map(|p| p.0).unwrap_or(Pattern::Unique(0));
        for &(p, r) in &patterns {
            if r <= 0.0 {
                continue;
            }
            if pick < r {
                chosen = p;
                break;
            }
            pick -= r;
        }
        if dec.rate_of(chosen) <= 0.0 {
            chosen = patterns
                .iter()
                .rev()
                .find(|p| p.1 > 0.0)
                .map(|p| p.0)
                .ok_or_else(|| Error::Numeric("shot law has zero total rate".into()))?;
        }
        self.sample_sizes(chosen, rng)
    }
}

fn check_len(sizes: &[f64], dim: usize) -> Result<()> {
    if sizes.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: sizes.len() });
    }
    if sizes.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(invalid("jump sizes must be finite and non-negative"));
    }
    Ok(())
}

/// One margin with exponential shot sizes.
#[derive(Debug, Clone)]
pub struct ExponentialShots {
    tail: MarginalTail,
    dec: Decomposition,
}

impl ExponentialShots {
    pub fn new(rho: f64, eta: f64) -> Result<Self> {
        Ok(Self { tail: MarginalTail::new(rho, eta)?, dec: Decomposition::univariate(rho) })
    }
}

impl ShotLaw for ExponentialShots {
    fn name(&self) -> &'static str {
        "exponential"
    }

    fn dim(&self) -> usize {
        1
    }

    fn decomposition(&self) -> &Decomposition {
        &self.dec
    }

    fn sample_sizes(&self, pattern: Pattern, rng: &mut dyn RngCore) -> Result<Sizes> {
        if pattern != Pattern::Unique(0) {
            return Err(invalid(format!("pattern {pattern:?} impossible for one margin")));
        }
        let x = Exp::new(self.tail.eta).map_err(|e| invalid(e.to_string()))?.sample(rng);
        Ok(smallvec![x.max(f64::MIN_POSITIVE)])
    }

    fn log_density(&self, sizes: &[f64]) -> Result<f64> {
        check_len(sizes, 1)?;
        if sizes[0] <= 0.0 {
            return Err(invalid("a jump must move at least one margin"));
        }
        Ok(self.tail.eta.ln() - self.tail.eta * sizes[0])
    }
}

/// Below this acceptance rate unique sizes are drawn by inversion instead of
/// rejection from the marginal exponential.
const REJECTION_FLOOR: f64 = 0.2;

/// Two margins with exponential marginal sizes coupled by a Lévy copula.
#[derive(Debug)]
pub struct CopulaShots {
    tails: [MarginalTail; 2],
    copula: Box<dyn LevyCopula>,
    dec: Decomposition,
    ln_total: f64,
    ln_rho: [f64; 2],
    ln_common: f64,
}

impl CopulaShots {
    pub fn new(tails: [MarginalTail; 2], copula: Box<dyn LevyCopula>) -> Result<Self> {
        let dec = decompose_rates(copula.as_ref(), tails[0].rho, tails[1].rho)?;
        let ln_total = dec.total_rate().ln();
        let ln_rho = [tails[0].rho.ln(), tails[1].rho.ln()];
        let ln_common = copula.ln_value(ln_rho[0], ln_rho[1]);
        Ok(Self { tails, copula, dec, ln_total, ln_rho, ln_common })
    }

    pub fn tails(&self) -> &[MarginalTail; 2] {
        &self.tails
    }

    pub fn copula(&self) -> &dyn LevyCopula {
        self.copula.as_ref()
    }

    fn sample_unique(&self, g: usize, rng: &mut dyn RngCore) -> Result<f64> {
        let own = self.tails[g];
        let (lr_own, lr_other) = (self.ln_rho[g], self.ln_rho[1 - g]);
        let accept_rate = self.dec.rho_unique[g] / own.rho;
        if accept_rate >= REJECTION_FLOOR {
            let exp = Exp::new(own.eta).map_err(|e| invalid(e.to_string()))?;
            loop {
                let x: f64 = exp.sample(rng);
                if x <= 0.0 {
                    continue;
                }
                let e: f64 = rng.sample(Exp1);
                if self.copula.keeps_unique(lr_own - own.eta * x, lr_other, e) {
                    return Ok(x);
                }
            }
        }
        // Invert the unique tail u - C(u, rho_other) in log u.
        let v: f64 = rng.sample(Open01);
        let lt = v.ln() + self.dec.rho_unique[g].ln();
        let unique_tail = |lu: f64| lu + log1m_exp(self.copula.ln_ratio_to_first(lu, lr_other));
        let hi = lr_own;
        let mut lo = hi - 1.0;
        let mut tries = 0;
        while unique_tail(lo) > lt {
            lo -= 10.0;
            tries += 1;
            if tries > 80 {
                return Err(Error::Inversion { target: lt.exp(), lo: lo.exp(), hi: hi.exp(), f_lo: unique_tail(lo).exp(), f_hi: unique_tail(hi).exp() });
            }
        }
        let lu = bisect(unique_tail, lo, hi, lt, 1e-13)?;
        Ok(own.size_at(lu).max(f64::MIN_POSITIVE))
    }
}

impl ShotLaw for CopulaShots {
    fn name(&self) -> &'static str {
        "levy-copula"
    }

    fn dim(&self) -> usize {
        2
    }

    fn decomposition(&self) -> &Decomposition {
        &self.dec
    }

    fn sample_sizes(&self, pattern: Pattern, rng: &mut dyn RngCore) -> Result<Sizes> {
        match pattern {
            Pattern::Common => {
                let (a, b) = common_jump_from_logs(&self.tails, self.copula.as_ref(), self.ln_rho, self.ln_common, rng)?;
                Ok(smallvec![a, b])
            }
            Pattern::Unique(g) if g < 2 => {
                let x = self.sample_unique(g, rng)?;
                let mut s: Sizes = smallvec![0.0, 0.0];
                s[g] = x;
                Ok(s)
            }
            Pattern::Unique(g) => Err(Error::OutOfRange { index: g, len: 2 }),
        }
    }

    fn log_density(&self, sizes: &[f64]) -> Result<f64> {
        check_len(sizes, 2)?;
        Ok(match Pattern::of(sizes)? {
            Pattern::Common => ln_common_jump_rate_density(sizes[0], sizes[1], &self.tails, self.copula.as_ref()),
            Pattern::Unique(g) => ln_unique_jump_rate_density(sizes[g], g, &self.tails, self.copula.as_ref()),
        } - self.ln_total)
    }
}

/// Two margins hit by independent unique streams and one common stream whose
/// size components are independent exponentials.
#[derive(Debug, Clone)]
pub struct CommonShockShots {
    dec: Decomposition,
    eta_unique: [f64; 2],
    eta_common: [f64; 2],
}

impl CommonShockShots {
    pub fn new(rho_unique: [f64; 2], rho_common: f64, eta_unique: [f64; 2], eta_common: [f64; 2]) -> Result<Self> {
        for r in rho_unique.iter().chain([&rho_common]) {
            if !(*r >= 0.0 && r.is_finite()) {
                return Err(invalid(format!("rates must be non-negative, got {r}")));
            }
        }
        if rho_unique.iter().sum::<f64>() + rho_common <= 0.0 {
            return Err(invalid("at least one stream needs a positive rate"));
        }
        for e in eta_unique.iter().chain(eta_common.iter()) {
            if !(*e > 0.0 && e.is_finite()) {
                return Err(invalid(format!("size rates must be positive, got {e}")));
            }
        }
        Ok(Self { dec: Decomposition { rho_common, rho_unique: smallvec![rho_unique[0], rho_unique[1]] }, eta_unique, eta_common })
    }

    /// `E[X1 X2]` of a common shot.
    pub fn mean_cross_product(&self) -> f64 {
        1.0 / (self.eta_common[0] * self.eta_common[1])
    }
}

impl ShotLaw for CommonShockShots {
    fn name(&self) -> &'static str {
        "common-shock"
    }

    fn dim(&self) -> usize {
        2
    }

    fn decomposition(&self) -> &Decomposition {
        &self.dec
    }

    fn sample_sizes(&self, pattern: Pattern, rng: &mut dyn RngCore) -> Result<Sizes> {
        let draw = |eta: f64, rng: &mut dyn RngCore| -> Result<f64> {
            Ok(Exp::new(eta).map_err(|e| invalid(e.to_string()))?.sample(rng).max(f64::MIN_POSITIVE))
        };
        match pattern {
            Pattern::Common => Ok(smallvec![draw(self.eta_common[0], rng)?, draw(self.eta_common[1], rng)?]),
            Pattern::Unique(g) if g < 2 => {
                let mut s: Sizes = smallvec![0.0, 0.0];
                s[g] = draw(self.eta_unique[g], rng)?;
                Ok(s)
            }
            Pattern::Unique(g) => Err(Error::OutOfRange { index: g, len: 2 }),
        }
    }

    fn log_density(&self, sizes: &[f64]) -> Result<f64> {
        check_len(sizes, 2)?;
        let ln_total = self.dec.total_rate().ln();
        let exp_ln = |eta: f64, x: f64| eta.ln() - eta * x;
        Ok(match Pattern::of(sizes)? {
            Pattern::Common => {
                self.dec.rho_common.ln() + exp_ln(self.eta_common[0], sizes[0]) + exp_ln(self.eta_common[1], sizes[1])
            }
            Pattern::Unique(g) => self.dec.rho_unique[g].ln() + exp_ln(self.eta_unique[g], sizes[g]),
        } - ln_total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy::Clayton;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unique_sampler_paths_agree() {
        // Strong dependence forces the inversion path for margin 1.
        let tails = [MarginalTail::new(2.0, 1.0).unwrap(), MarginalTail::new(2.0, 1.0).unwrap()];
        let law = CopulaShots::new(tails, Box::new(Clayton::new(8.0).unwrap())).unwrap();
        let acc = law.dec.rho_unique[0] / 2.0;
        assert!(acc < REJECTION_FLOOR, "{acc}");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mean = (0..n).map(|_| law.sample_sizes(Pattern::Unique(0), &mut rng).unwrap()[0]).sum::<f64>() / n as f64;
        let exact = crate::numeric::integrate_to_infinity(
            |x| x * crate::levy::unique_jump_density(x, 0, &tails, law.copula()).unwrap_or(0.0),
            0.0,
            1e-12,
            1e-10,
        );
        assert!((mean - exact).abs() < 0.02 * exact, "{mean} {exact}");
    }

    #[test]
    fn pattern_frequencies_follow_rates() {
        let law = CommonShockShots::new([1.0, 2.0], 1.0, [1.0, 1.0], [1.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40_000;
        let common = (0..n).filter(|_| law.sample(&mut rng).unwrap().iter().all(|&x| x > 0.0)).count();
        let p = 0.25;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!(((common as f64 / n as f64) - p).abs() < 4.0 * se);
    }

    #[test]
    fn exponential_law_density() {
        let law = ExponentialShots::new(3.0, 2.0).unwrap();
        assert!((law.log_density(&[0.5]).unwrap() - (2f64.ln() - 1.0)).abs() < 1e-15);
        assert!(law.log_density(&[0.5, 1.0]).is_err());
    }
}
