//! Bivariate Lévy copulas for compound-Poisson shot streams: rate
//! decomposition into unique and common shots, common-jump sampling and the
//! size densities used by the trajectory prior.
//!
//! Copulas are evaluated on log tail masses so that extreme jump sizes and
//! large dependence parameters stay representable.

use std::fmt::Debug;

use rand::{Rng, RngCore};
use rand_distr::Exp1;
use smallvec::smallvec;

use crate::error::{invalid, Error, Result};
use crate::numeric::{bisect, integrate_to_infinity, log1m_exp, log_add_exp, softplus};
use crate::shot::Sizes;

/// An exchangeable bivariate Lévy copula evaluated in log coordinates.
///
/// `lu`, `lv` are natural logs of tail masses; `lv = +inf` is the marginal
/// limit.
pub trait LevyCopula: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn param(&self) -> f64;

    fn with_param(&self, param: f64) -> Result<Box<dyn LevyCopula>>;

    /// `ln C(u, v)`.
    fn ln_value(&self, lu: f64, lv: f64) -> f64;

    /// `ln C(u, v) - ln u`, accurate when `C(u, v)` is close to `u`.
    fn ln_ratio_to_first(&self, lu: f64, lv: f64) -> f64 {
        (self.ln_value(lu, lv) - lu).min(0.0)
    }

    /// `ln ∂C/∂u (u, v)`.
    fn ln_d1(&self, lu: f64, lv: f64) -> f64;

    /// `ln ∂²C/∂u∂v (u, v)`.
    fn ln_d12(&self, lu: f64, lv: f64) -> f64;

    /// `ln(1 - ∂C/∂u (u, v))`.
    fn ln_one_minus_d1(&self, lu: f64, lv: f64) -> f64 {
        log1m_exp(self.ln_d1(lu, lv))
    }

    /// `ln u` solving `C(u, v) = t`, for `t < v`.
    fn ln_solve_value(&self, lt: f64, lv: f64) -> Result<f64> {
        let lo = lt - 1.0;
        let hi = lt + 60.0;
        bisect(|lu| self.ln_value(lu, lv), lo, hi, lt, 1e-13)
    }

    /// Given `e ~ Exp(1)`, whether a shot with tail mass `u` stays unique:
    /// true with probability `1 - ∂C/∂u (u, v)`.
    fn keeps_unique(&self, lu: f64, lv: f64, e: f64) -> bool {
        e <= -self.ln_d1(lu, lv)
    }

    /// `ln v` solving `∂C/∂u (u, v) = w`, for `0 < w < 1`.
    fn ln_solve_d1(&self, lu: f64, lw: f64) -> Result<f64> {
        bisect(|lv| self.ln_d1(lu, lv), lu - 700.0, lu + 700.0, lw, 1e-13)
    }
}

/// Clayton Lévy copula `(u^-δ + v^-δ)^(-1/δ)`, `δ > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clayton {
    delta: f64,
}

impl Clayton {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(invalid(format!("Clayton parameter must be positive and finite, got {delta}")));
        }
        Ok(Self { delta })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    fn ln_sum(&self, lu: f64, lv: f64) -> f64 {
        log_add_exp(-self.delta * lu, -self.delta * lv)
    }
}

impl LevyCopula for Clayton {
    fn name(&self) -> &'static str {
        "clayton"
    }

    fn param(&self) -> f64 {
        self.delta
    }

    fn with_param(&self, param: f64) -> Result<Box<dyn LevyCopula>> {
        Ok(Box::new(Clayton::new(param)?))
    }

    fn ln_value(&self, lu: f64, lv: f64) -> f64 {
        -self.ln_sum(lu, lv) / self.delta
    }

    fn ln_ratio_to_first(&self, lu: f64, lv: f64) -> f64 {
        if lv == f64::INFINITY {
            return 0.0;
        }
        -softplus(self.delta * (lu - lv)) / self.delta
    }

    fn ln_d1(&self, lu: f64, lv: f64) -> f64 {
        if lv == f64::INFINITY {
            return 0.0;
        }
        -(1.0 / self.delta + 1.0) * softplus(self.delta * (lu - lv))
    }

    fn keeps_unique(&self, lu: f64, lv: f64, e: f64) -> bool {
        if lv == f64::INFINITY {
            return false;
        }
        // -ln ∂C/∂u = (1 + 1/δ) ln(1 + t) with t = (u/v)^δ; the bounds
        // 2t/(2+t) <= ln(1+t) <= t settle most draws without a logarithm.
        let z = self.delta * (lu - lv);
        let target = e / (1.0 + 1.0 / self.delta);
        if z > 30.0 {
            return target <= softplus(z);
        }
        let t = z.exp();
        if target <= 2.0 * t / (2.0 + t) {
            true
        } else if target > t {
            false
        } else {
            target <= t.ln_1p()
        }
    }

    fn ln_d12(&self, lu: f64, lv: f64) -> f64 {
        let d = self.delta;
        d.ln_1p() + (-d - 1.0) * (lu + lv) + (-1.0 / d - 2.0) * self.ln_sum(lu, lv)
    }

    fn ln_solve_value(&self, lt: f64, lv: f64) -> Result<f64> {
        if lv == f64::INFINITY {
            return Ok(lt);
        }
        let gap = -(self.delta * (lt - lv)).exp_m1();
        if !(gap > 0.0) {
            return Err(Error::Inversion { target: lt.exp(), lo: 0.0, hi: lv.exp(), f_lo: 0.0, f_hi: lv.exp() });
        }
        Ok(lt - gap.ln() / self.delta)
    }

    fn ln_solve_d1(&self, lu: f64, lw: f64) -> Result<f64> {
        let d = self.delta;
        let z = (-(d / (1.0 + d)) * lw).exp_m1();
        if !(z > 0.0 && z.is_finite()) {
            return Err(Error::Inversion { target: lw.exp(), lo: 0.0, hi: f64::INFINITY, f_lo: 0.0, f_hi: 1.0 });
        }
        Ok(lu - z.ln() / d)
    }
}

type CopulaCtor = fn(f64) -> Result<Box<dyn LevyCopula>>;

const COPULAS: &[(&str, CopulaCtor)] = &[("clayton", |p| Ok(Box::new(Clayton::new(p)?)))];

/// Names accepted by [`copula_by_name`].
pub fn copula_names() -> impl Iterator<Item = &'static str> {
    COPULAS.iter().map(|(n, _)| *n)
}

pub fn copula_by_name(name: &str, param: f64) -> Result<Box<dyn LevyCopula>> {
    let key = name.trim().to_ascii_lowercase();
    COPULAS
        .iter()
        .find(|(n, _)| *n == key)
        .ok_or_else(|| Error::Config(format!("unknown Lévy copula '{name}'")))
        .and_then(|(_, ctor)| ctor(param))
}

/// Clayton copula on plain tail masses; `f64::INFINITY` is allowed as a limit.
pub fn clayton_value(u1: f64, u2: f64, delta: f64) -> Result<f64> {
    let c = Clayton::new(delta)?;
    for u in [u1, u2] {
        if !(u > 0.0) {
            return Err(invalid(format!("tail mass must be positive, got {u}")));
        }
    }
    Ok(c.ln_value(u1.ln(), u2.ln()).exp())
}

/// Exponential tail integral `U(x) = rho e^{-eta x}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalTail {
    pub rho: f64,
    pub eta: f64,
}

impl MarginalTail {
    pub fn new(rho: f64, eta: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite() && eta > 0.0 && eta.is_finite()) {
            return Err(invalid(format!("tail needs positive rho and eta, got ({rho}, {eta})")));
        }
        Ok(Self { rho, eta })
    }

    pub fn value(&self, x: f64) -> f64 {
        self.rho * (-self.eta * x).exp()
    }

    pub fn ln_value(&self, x: f64) -> f64 {
        self.rho.ln() - self.eta * x
    }

    /// Size whose log tail mass is `lu`.
    pub fn size_at(&self, lu: f64) -> f64 {
        (self.rho.ln() - lu) / self.eta
    }
}

/// Split of shot arrival rates into unique and common streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub rho_common: f64,
    pub rho_unique: Sizes,
}

/// Zero pattern of a shot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pattern {
    /// Only margin `g` moves.
    Unique(usize),
    /// Every margin moves.
    Common,
}

impl Pattern {
    pub fn of(sizes: &[f64]) -> Result<Self> {
        let positive: Sizes = sizes.iter().copied().filter(|&x| x > 0.0).collect();
        match (sizes.len(), positive.len()) {
            (_, 0) => Err(invalid("a jump must move at least one margin")),
            (1, 1) => Ok(Pattern::Unique(0)),
            (2, 2) => Ok(Pattern::Common),
            (2, 1) => Ok(Pattern::Unique(if sizes[0] > 0.0 { 0 } else { 1 })),
            (g, _) => Err(Error::UnimplementedDimension(g)),
        }
    }
}

impl Decomposition {
    /// A single margin: every shot is unique.
    pub fn univariate(rho: f64) -> Self {
        Self { rho_common: 0.0, rho_unique: smallvec![rho] }
    }

    pub fn dim(&self) -> usize {
        self.rho_unique.len()
    }

    pub fn marginal_rate(&self, g: usize) -> f64 {
        self.rho_unique[g] + if self.dim() > 1 { self.rho_common } else { 0.0 }
    }

    /// Rate of the driving shot process, unique plus common.
    pub fn total_rate(&self) -> f64 {
        self.rho_unique.iter().sum::<f64>() + self.rho_common
    }

    pub fn patterns(&self) -> Vec<(Pattern, f64)> {
        let mut out: Vec<(Pattern, f64)> = self.rho_unique.iter().enumerate().map(|(g, &r)| (Pattern::Unique(g), r)).collect();
        if self.dim() > 1 {
            out.push((Pattern::Common, self.rho_common));
        }
        out
    }

    pub fn rate_of(&self, pattern: Pattern) -> f64 {
        match pattern {
            Pattern::Unique(g) => self.rho_unique.get(g).copied().unwrap_or(0.0),
            Pattern::Common if self.dim() > 1 => self.rho_common,
            Pattern::Common => 0.0,
        }
    }

    pub fn pattern_probability(&self, pattern: Pattern) -> f64 {
        self.rate_of(pattern) / self.total_rate()
    }
}

/// Common-stream rate `C(rho1, rho2)` and the residual unique rates.
///
/// The common rate is snapped onto the spacing of the larger marginal
/// rate so that `rho_common + rho_unique[g]` reproduces `rho_g` exactly.
pub fn decompose_rates(copula: &dyn LevyCopula, rho1: f64, rho2: f64) -> Result<Decomposition> {
    for r in [rho1, rho2] {
        if !(r > 0.0 && r.is_finite()) {
            return Err(invalid(format!("rates must be positive and finite, got {r}")));
        }
    }
    let raw = copula.ln_value(rho1.ln(), rho2.ln()).exp().min(rho1).min(rho2);
    let spacing = ulp(rho1).max(ulp(rho2));
    let low = rho1.min(rho2);
    let mut rho_common = (raw / spacing).round() * spacing;
    if rho_common > low {
        // Clamping to `low` would leave a value off the grid.
        rho_common = (low / spacing).floor() * spacing;
    }
    Ok(Decomposition { rho_common, rho_unique: smallvec![rho1 - rho_common, rho2 - rho_common] })
}

fn ulp(x: f64) -> f64 {
    let bits = x.abs().to_bits();
    f64::from_bits(bits + 1) - x.abs()
}

fn check_dims(tails: &[MarginalTail]) -> Result<()> {
    if tails.len() != 2 {
        return Err(Error::UnimplementedDimension(tails.len()));
    }
    Ok(())
}

/// Log tail masses for a common jump of sizes `(x1, x2)`.
fn ln_masses(tails: &[MarginalTail], x1: f64, x2: f64) -> (f64, f64) {
    (tails[0].ln_value(x1), tails[1].ln_value(x2))
}

/// Draws a common jump: the first size from the common-part marginal tail
/// `C(U1(x), rho2) / rho_common`, the second from the conditional law given
/// by `∂C/∂u`.
pub fn sample_common_jump(tails: &[MarginalTail], copula: &dyn LevyCopula, rng: &mut dyn RngCore) -> Result<(f64, f64)> {
    check_dims(tails)?;
    let lr = [tails[0].rho.ln(), tails[1].rho.ln()];
    common_jump_from_logs(tails, copula, lr, copula.ln_value(lr[0], lr[1]), rng)
}

/// [`sample_common_jump`] with the log rates `lr` and `ln C(rho1, rho2)`
/// precomputed.
pub(crate) fn common_jump_from_logs(
    tails: &[MarginalTail],
    copula: &dyn LevyCopula,
    lr: [f64; 2],
    ln_common: f64,
    rng: &mut dyn RngCore,
) -> Result<(f64, f64)> {
    // Logs of open-interval uniforms, as negated standard exponentials.
    let mut neg_exp = || loop {
        let e: f64 = rng.sample(Exp1);
        if e > 0.0 {
            break -e;
        }
    };
    let lu = copula.ln_solve_value(neg_exp() + ln_common, lr[1])?.min(lr[0]);
    let lw = neg_exp() + copula.ln_d1(lu, lr[1]);
    let lv = copula.ln_solve_d1(lu, lw)?.min(lr[1]);
    let x1 = (lr[0] - lu) / tails[0].eta;
    let x2 = (lr[1] - lv) / tails[1].eta;
    if !(x1 > 0.0 && x2 > 0.0 && x1.is_finite() && x2.is_finite()) {
        return Err(Error::Inversion { target: lu.exp(), lo: 0.0, hi: 1.0, f_lo: x1, f_hi: x2 });
    }
    Ok((x1, x2))
}

/// Log of `rho_common × common_jump_density`; finite whenever both sizes are positive.
pub fn ln_common_jump_rate_density(x1: f64, x2: f64, tails: &[MarginalTail], copula: &dyn LevyCopula) -> f64 {
    let (lu, lv) = ln_masses(tails, x1, x2);
    copula.ln_d12(lu, lv) + tails[0].eta.ln() + lu + tails[1].eta.ln() + lv
}

/// Density of a common jump on the positive quadrant.
pub fn common_jump_density(x1: f64, x2: f64, tails: &[MarginalTail], copula: &dyn LevyCopula) -> Result<f64> {
    check_dims(tails)?;
    if !(x1 > 0.0 && x2 > 0.0) {
        return Err(invalid("common jump sizes must be positive"));
    }
    let dec = decompose_rates(copula, tails[0].rho, tails[1].rho)?;
    Ok((ln_common_jump_rate_density(x1, x2, tails, copula) - dec.rho_common.ln()).exp())
}

/// Log of `rho_unique[margin] × unique_jump_density`.
pub fn ln_unique_jump_rate_density(x: f64, margin: usize, tails: &[MarginalTail], copula: &dyn LevyCopula) -> f64 {
    let own = tails[margin];
    let other = tails[1 - margin];
    let lu = own.ln_value(x);
    own.eta.ln() + lu + copula.ln_one_minus_d1(lu, other.rho.ln())
}

/// Density of a shot that moves only `margin`.
pub fn unique_jump_density(x: f64, margin: usize, tails: &[MarginalTail], copula: &dyn LevyCopula) -> Result<f64> {
    check_dims(tails)?;
    if margin > 1 {
        return Err(Error::OutOfRange { index: margin, len: 2 });
    }
    if !(x > 0.0) {
        return Err(invalid("unique jump size must be positive"));
    }
    let dec = decompose_rates(copula, tails[0].rho, tails[1].rho)?;
    Ok((ln_unique_jump_rate_density(x, margin, tails, copula) - dec.rho_unique[margin].ln()).exp())
}

/// Density of the common-part marginal of `margin`.
pub fn common_marginal_density(x: f64, margin: usize, tails: &[MarginalTail], copula: &dyn LevyCopula) -> Result<f64> {
    check_dims(tails)?;
    let dec = decompose_rates(copula, tails[0].rho, tails[1].rho)?;
    let own = tails[margin];
    let lu = own.ln_value(x);
    let ld = copula.ln_d1(lu, tails[1 - margin].rho.ln());
    Ok((ld + own.eta.ln() + lu - dec.rho_common.ln()).exp())
}

/// Log-density of a shot under the pattern mixture: the common density
/// weighted by `rho_common / rho`, unique densities by `rho_unique[g] / rho`,
/// with `rho = rho1 + rho2 - rho_common`.
pub fn joint_shot_log_density(sizes: &[f64], tails: &[MarginalTail], copula: &dyn LevyCopula) -> Result<f64> {
    check_dims(tails)?;
    if sizes.len() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: sizes.len() });
    }
    if sizes.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(invalid("jump sizes must be finite and non-negative"));
    }
    let dec = decompose_rates(copula, tails[0].rho, tails[1].rho)?;
    let ln_total = dec.total_rate().ln();
    Ok(match Pattern::of(sizes)? {
        Pattern::Common => ln_common_jump_rate_density(sizes[0], sizes[1], tails, copula) - ln_total,
        Pattern::Unique(g) => ln_unique_jump_rate_density(sizes[g], g, tails, copula) - ln_total,
    })
}

/// `E[X1 X2]` under the common-jump law, from the bivariate tail:
/// `(1 / (rho_common eta1 eta2)) ∫∫ C(rho1 e^-s, rho2 e^-t) ds dt`.
pub fn mean_cross_product(tails: &[MarginalTail], copula: &dyn LevyCopula) -> Result<f64> {
    check_dims(tails)?;
    let dec = decompose_rates(copula, tails[0].rho, tails[1].rho)?;
    if dec.rho_common <= 0.0 {
        return Err(Error::Undefined("no common shots at this dependence level".into()));
    }
    let lr1 = tails[0].rho.ln();
    let lr2 = tails[1].rho.ln();
    let lc = dec.rho_common.ln();
    let outer = integrate_to_infinity(
        |s| integrate_to_infinity(|t| (copula.ln_value(lr1 - s, lr2 - t) - lc).exp(), 0.0, 1e-13, 1e-11),
        0.0,
        1e-12,
        1e-10,
    );
    Ok(outer / (tails[0].eta * tails[1].eta))
}

/// Mean size of the `margin` component of a common jump.
pub fn mean_common_size(tails: &[MarginalTail], copula: &dyn LevyCopula, margin: usize) -> Result<f64> {
    check_dims(tails)?;
    let dec = decompose_rates(copula, tails[0].rho, tails[1].rho)?;
    if dec.rho_common <= 0.0 {
        return Err(Error::Undefined("no common shots at this dependence level".into()));
    }
    let own = tails[margin];
    let lo = tails[1 - margin].rho.ln();
    let lc = dec.rho_common.ln();
    let v = integrate_to_infinity(|s| (copula.ln_value(own.rho.ln() - s, lo) - lc).exp(), 0.0, 1e-13, 1e-11);
    Ok(v / own.eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::integrate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table3_tails() -> [MarginalTail; 2] {
        [MarginalTail::new(33.77, 0.17).unwrap(), MarginalTail::new(18.74, 0.18).unwrap()]
    }

    #[test]
    fn clayton_value_examples() {
        assert!((clayton_value(1.0, 1.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((clayton_value(3.7, f64::INFINITY, 2.5).unwrap() - 3.7).abs() < 1e-14);
        let direct = (33.77f64.powf(-0.4214) + 18.74f64.powf(-0.4214)).powf(-1.0 / 0.4214);
        let v = clayton_value(33.77, 18.74, 0.4214).unwrap();
        assert!((v - direct).abs() < 1e-12);
        assert!((v - 4.77).abs() < 0.005, "{v}");
        assert!(clayton_value(0.0, 1.0, 1.0).is_err());
        assert!(clayton_value(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn decomposition_examples() {
        let c = Clayton::new(1.0).unwrap();
        let d = decompose_rates(&c, 2.0, 2.0).unwrap();
        assert_eq!(d.rho_common, 1.0);
        assert_eq!(d.rho_unique.as_slice(), &[1.0, 1.0]);
        let c = Clayton::new(1e-3).unwrap();
        assert!(decompose_rates(&c, 5.0, 5.0).unwrap().rho_common < 1e-200);
        let c = Clayton::new(0.4214).unwrap();
        let d = decompose_rates(&c, 33.77, 18.74).unwrap();
        assert!((d.rho_unique[0] - 29.00).abs() < 0.01);
        assert!((d.rho_unique[1] - 13.97).abs() < 0.01);
        assert!((d.total_rate() - (33.77 + 18.74 - d.rho_common)).abs() < 1e-12);
    }

    #[test]
    fn registry_lookup() {
        assert_eq!(copula_by_name("Clayton", 0.7).unwrap().param(), 0.7);
        assert!(matches!(copula_by_name("gumbel", 1.0), Err(Error::Config(_))));
        assert!(copula_names().any(|n| n == "clayton"));
    }

    #[test]
    fn closed_form_derivatives_match_finite_differences() {
        let c = Clayton::new(1.3).unwrap();
        let (u, v) = (0.8f64, 2.1f64);
        let cv = |u: f64, v: f64| c.ln_value(u.ln(), v.ln()).exp();
        let h = 1e-5;
        let d1 = (cv(u + h, v) - cv(u - h, v)) / (2.0 * h);
        assert!((c.ln_d1(u.ln(), v.ln()).exp() - d1).abs() < 1e-8);
        let h = 1e-4;
        let d12 = (cv(u + h, v + h) - cv(u + h, v - h) - cv(u - h, v + h) + cv(u - h, v - h)) / (4.0 * h * h);
        assert!((c.ln_d12(u.ln(), v.ln()).exp() - d12).abs() / d12 < 1e-6);
    }

    #[test]
    fn closed_form_inverses_agree_with_bisection() {
        #[derive(Debug)]
        struct Generic(Clayton);
        impl LevyCopula for Generic {
            fn name(&self) -> &'static str {
                "generic"
            }
            fn param(&self) -> f64 {
                self.0.param()
            }
            fn with_param(&self, p: f64) -> Result<Box<dyn LevyCopula>> {
                Ok(Box::new(Generic(Clayton::new(p)?)))
            }
            fn ln_value(&self, lu: f64, lv: f64) -> f64 {
                self.0.ln_value(lu, lv)
            }
            fn ln_d1(&self, lu: f64, lv: f64) -> f64 {
                self.0.ln_d1(lu, lv)
            }
            fn ln_d12(&self, lu: f64, lv: f64) -> f64 {
                self.0.ln_d12(lu, lv)
            }
        }
        let c = Clayton::new(0.6).unwrap();
        let g = Generic(c);
        let (lt, lv) = (0.3f64.ln(), 2.0f64.ln());
        assert!((c.ln_solve_value(lt, lv).unwrap() - g.ln_solve_value(lt, lv).unwrap()).abs() < 1e-10);
        let (lu, lw) = (1.5f64.ln(), 0.4f64.ln());
        assert!((c.ln_solve_d1(lu, lw).unwrap() - g.ln_solve_d1(lu, lw).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn common_density_integrates_to_one() {
        let tails = [MarginalTail::new(1.0, 1.0).unwrap(), MarginalTail::new(1.5, 2.0).unwrap()];
        let c = Clayton::new(0.8).unwrap();
        let total = integrate_to_infinity(
            |x1| integrate_to_infinity(|x2| common_jump_density(x1, x2, &tails, &c).unwrap_or(0.0), 0.0, 1e-13, 1e-11),
            0.0,
            1e-12,
            1e-10,
        );
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn common_density_is_mixed_partial_of_tail() {
        let tails = [MarginalTail::new(1.0, 1.0).unwrap(), MarginalTail::new(1.0, 1.0).unwrap()];
        let c = Clayton::new(1.0).unwrap();
        let rc = decompose_rates(&c, 1.0, 1.0).unwrap().rho_common;
        let tail = |a: f64, b: f64| clayton_value((-a).exp(), (-b).exp(), 1.0).unwrap();
        let h = 1e-3;
        let fd = (tail(1.0 + h, 1.0 + h) - tail(1.0 + h, 1.0 - h) - tail(1.0 - h, 1.0 + h) + tail(1.0 - h, 1.0 - h)) / (4.0 * h * h);
        let dens = common_jump_density(1.0, 1.0, &tails, &c).unwrap();
        assert!((dens - fd / rc).abs() / dens < 1e-4);
        assert!((common_jump_density(0.3, 1.7, &tails, &c).unwrap() - common_jump_density(1.7, 0.3, &tails, &c).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn unique_density_mixture_identity_and_normalisation() {
        let tails = table3_tails();
        let c = Clayton::new(0.4214).unwrap();
        let d = decompose_rates(&c, tails[0].rho, tails[1].rho).unwrap();
        for g in 0..2 {
            let rho = tails[g].rho;
            let eta = tails[g].eta;
            for &x in &[0.01, 0.5, 3.0, 20.0, 60.0] {
                let mix = d.rho_unique[g] / rho * unique_jump_density(x, g, &tails, &c).unwrap()
                    + d.rho_common / rho * common_marginal_density(x, g, &tails, &c).unwrap();
                let target = eta * (-eta * x).exp();
                assert!((mix - target).abs() < 1e-8 * target.max(1e-3), "{g} {x}: {mix} {target}");
            }
            let total = integrate_to_infinity(|x| unique_jump_density(x, g, &tails, &c).unwrap_or(0.0), 0.0, 1e-13, 1e-11);
            assert!((total - 1.0).abs() < 1e-6, "{total}");
        }
    }

    #[test]
    fn unique_density_independence_limit() {
        let tails = [MarginalTail::new(2.0, 0.5).unwrap(), MarginalTail::new(3.0, 1.5).unwrap()];
        let c = Clayton::new(0.01).unwrap();
        for &x in &[0.1, 1.0, 5.0] {
            let v = unique_jump_density(x, 0, &tails, &c).unwrap();
            assert!((v - 0.5 * (-0.5 * x).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn pattern_weights_sum_to_one() {
        let c = Clayton::new(0.9).unwrap();
        let d = decompose_rates(&c, 4.0, 2.5).unwrap();
        let s: f64 = d.patterns().iter().map(|&(p, _)| d.pattern_probability(p)).sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn joint_density_symmetry_and_errors() {
        let tails = [MarginalTail::new(2.0, 1.0).unwrap(), MarginalTail::new(2.0, 1.0).unwrap()];
        let c = Clayton::new(0.7).unwrap();
        let a = joint_shot_log_density(&[1.3, 0.0], &tails, &c).unwrap();
        let b = joint_shot_log_density(&[0.0, 1.3], &tails, &c).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!(joint_shot_log_density(&[0.0, 0.0], &tails, &c).is_err());
        let three = [tails[0], tails[1], tails[0]];
        assert!(matches!(joint_shot_log_density(&[1.0, 1.0, 1.0], &three, &c), Err(Error::UnimplementedDimension(3))));
    }

    #[test]
    fn comonotone_limit_matches_quantiles() {
        let tails = [MarginalTail::new(3.0, 1.0).unwrap(), MarginalTail::new(2.0, 0.5).unwrap()];
        let c = Clayton::new(500.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let (x1, x2) = sample_common_jump(&tails, &c, &mut rng).unwrap();
            let (u1, u2) = (tails[0].value(x1), tails[1].value(x2));
            assert!((u1 - u2).abs() < 2e-2 * u1.max(u2), "{u1} {u2}");
        }
    }

    #[test]
    fn sampled_cross_moment_matches_quadrature() {
        let tails = table3_tails();
        let c = Clayton::new(0.4214).unwrap();
        let d = decompose_rates(&c, tails[0].rho, tails[1].rho).unwrap();
        let quad = integrate_to_infinity(
            |x1| {
                integrate_to_infinity(
                    |x2| x1 * x2 * (ln_common_jump_rate_density(x1, x2, &tails, &c) - d.rho_common.ln()).exp(),
                    0.0,
                    1e-12,
                    1e-10,
                )
            },
            0.0,
            1e-10,
            1e-10,
        );
        let closed = mean_cross_product(&tails, &c).unwrap();
        assert!((quad - closed).abs() < 1e-6 * closed, "{quad} {closed}");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 400_000;
        let mean = (0..n)
            .map(|_| {
                let (a, b) = sample_common_jump(&tails, &c, &mut rng).unwrap();
                a * b
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - closed).abs() < 0.01 * closed, "{mean} {closed}");
    }

    #[test]
    fn mean_common_size_by_density() {
        let tails = table3_tails();
        let c = Clayton::new(0.4214).unwrap();
        let m = mean_common_size(&tails, &c, 1).unwrap();
        let q = integrate(|x| x * common_marginal_density(x, 1, &tails, &c).unwrap(), 0.0, 400.0, 1e-12, 1e-12);
        assert!((m - q).abs() < 1e-7 * m);
    }
}
