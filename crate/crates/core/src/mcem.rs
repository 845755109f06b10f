//! Monte Carlo EM calibration: moment-matching starts, per-margin fits, and
//! the dependence parameter fitted with the margins held fixed.

use log::warn;
use rayon::prelude::*;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{invalid, Error, Result};
use crate::law::{CopulaShots, ExponentialShots, ShotLaw};
use crate::levy::{decompose_rates, mean_cross_product, Clayton, LevyCopula, MarginalTail, Pattern};
use crate::likelihood::{sum_logprob, weight_and_bin, CountsPanel, ExposureSeries};
use crate::numeric::{bisect, golden_max, KahanSum};
use crate::rjmcmc::{ChainState, FilterConfig, FilterDiagnostics, PoissonCounts, Sampler};
use crate::rng::{self, streams};
use crate::shot::{simulate_trajectory, DailyAccumulator, JumpEvent, MarginalShotParams, Sizes, Trajectory};

/// Smallest dependence parameter considered.
pub const DELTA_FLOOR: f64 = 0.01;
/// Largest dependence parameter considered.
pub const DELTA_CEILING: f64 = 50.0;
/// Largest decay rate (per day) considered by moment matching.
pub const KAPPA_CEILING: f64 = 20.0;
const KAPPA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub em_iters: usize,
    /// Sweeps per E-step.
    pub mcmc_iters: usize,
    pub samples: usize,
    pub burn_fraction: f64,
    pub sweep_len: Option<usize>,
    /// Trailing iterations summarised by [`FitTrace::mean_relative_change`].
    pub convergence_window: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { em_iters: 150, mcmc_iters: 20_000, samples: 100, burn_fraction: 0.5, sweep_len: None, convergence_window: 50, seed: 0 }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.em_iters == 0 {
            return Err(Error::Config("em_iters must be positive".into()));
        }
        self.filter_config(0).validate()
    }

    fn filter_config(&self, iteration: usize) -> FilterConfig {
        FilterConfig {
            iterations: self.mcmc_iters,
            burn_fraction: self.burn_fraction,
            samples: self.samples,
            sweep_len: self.sweep_len,
            recompute_every: 10,
            seed: iteration_seed(self.seed, iteration),
        }
    }
}

fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    seed ^ (iteration as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One EM iteration: parameter values after the M-step and their relative
/// change from the previous iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub values: Vec<(String, f64)>,
    pub relative_changes: Vec<f64>,
    /// Averaged complete-data log-likelihood at the previous and new
    /// parameters, over this iteration's samples.
    pub q_previous: f64,
    pub q_new: f64,
    /// Set when the M-step failed and the previous iterate was kept.
    pub flagged: bool,
    pub acceptance: [f64; 5],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitTrace {
    pub records: Vec<TraceRecord>,
}

impl FitTrace {
    /// Tidy rows `(iteration, parameter, value, relative_change)`.
    pub fn rows(&self) -> impl Iterator<Item = (usize, &str, f64, f64)> + '_ {
        self.records.iter().flat_map(|r| {
            r.values.iter().zip(&r.relative_changes).map(move |((name, v), rc)| (r.iteration, name.as_str(), *v, *rc))
        })
    }

    /// Mean absolute relative change of `parameter` over the last `window` iterations.
    pub fn mean_relative_change(&self, parameter: &str, window: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .records
            .iter()
            .rev()
            .take(window)
            .filter_map(|r| r.values.iter().position(|(n, _)| n == parameter).map(|i| r.relative_changes[i].abs()))
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

#[derive(Debug, Clone)]
pub struct MarginalFit {
    pub params: MarginalShotParams,
    pub trace: FitTrace,
    pub samples: Vec<Trajectory>,
    pub final_state: Trajectory,
    pub diagnostics: FilterDiagnostics,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CopulaFit {
    pub delta: f64,
    pub marginals: [MarginalShotParams; 2],
    pub trace: FitTrace,
    pub samples: Vec<Trajectory>,
    pub final_state: Trajectory,
    pub diagnostics: FilterDiagnostics,
    pub warnings: Vec<String>,
}

/// A moment-matching estimate and any warnings raised on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate<T> {
    pub value: T,
    pub warnings: Vec<String>,
}

/// Period exposure averages and exposure-standardised counts of one margin.
fn standardised(panel: &CountsPanel, exposure: &ExposureSeries, g: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let pd = panel.period_days();
    if exposure.num_days() < panel.num_days() {
        return Err(Error::DimensionMismatch { expected: panel.num_days(), got: exposure.num_days() });
    }
    let w: Vec<f64> = exposure.margin(g)[..panel.num_days()].chunks(pd).map(|c| c.iter().sum::<f64>() / pd as f64).collect();
    let y = panel.margin(g).iter().zip(&w).map(|(&n, &w)| n as f64 / w).collect();
    Ok((w, y))
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// `2 (a - 1 + e^-a)`, with a series for small `a`.
fn var_factor(a: f64) -> f64 {
    if a < 1e-4 {
        a * a - a * a * a / 3.0
    } else {
        2.0 * (a - 1.0 + (-a).exp())
    }
}

/// Lag-one autocorrelation of period integrals of a stationary shot-noise
/// intensity, as a function of `a = κΔ`.
fn lag_one_ratio(a: f64) -> f64 {
    let b = -(-a).exp_m1();
    b * b / var_factor(a)
}

/// Moment-matching start for one margin: mean, excess variance and lag-one
/// autocovariance of exposure-standardised counts.
pub fn moment_match_marginal(panel: &CountsPanel, exposure: &ExposureSeries, margin: usize) -> Result<MomentEstimate<MarginalShotParams>> {
    if margin >= panel.dim() {
        return Err(Error::OutOfRange { index: margin, len: panel.dim() });
    }
    let l = panel.num_periods();
    if l < 3 {
        return Err(invalid("moment matching needs at least three periods"));
    }
    let dt = panel.period_days() as f64;
    let (w, y) = standardised(panel, exposure, margin)?;
    let my = mean(&y);
    if my <= 0.0 {
        return Err(invalid("moment matching needs at least one count"));
    }
    let m = my / dt;
    let var_y = y.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / (l - 1) as f64;
    let noise = panel.margin(margin).iter().zip(&w).map(|(&n, &w)| n as f64 / (w * w)).sum::<f64>() / l as f64;
    let var_i = var_y - noise;
    let cov1 = y.windows(2).map(|p| (p[0] - my) * (p[1] - my)).sum::<f64>() / (l - 1) as f64;
    let mut warnings = Vec::new();
    let a_max = KAPPA_CEILING * dt;
    let (kappa, v) = if var_i <= 0.0 {
        let msg = "no overdispersion in counts; decay rate pinned at its upper guard".to_string();
        warn!("{msg}");
        warnings.push(msg);
        (KAPPA_CEILING, 0.01 * m * m)
    } else {
        let r = cov1 / var_i;
        let a = if r <= lag_one_ratio(a_max) {
            let msg = format!("lag-one autocorrelation {r:.3} too small; decay rate pinned at its upper guard");
            warn!("{msg}");
            warnings.push(msg);
            a_max
        } else if r >= lag_one_ratio(KAPPA_FLOOR * dt) {
            let msg = format!("lag-one autocorrelation {r:.3} too large; decay rate pinned at its lower guard");
            warn!("{msg}");
            warnings.push(msg);
            KAPPA_FLOOR * dt
        } else {
            bisect(|la: f64| lag_one_ratio(la.exp()).ln(), (KAPPA_FLOOR * dt).ln(), a_max.ln(), r.ln(), 1e-12).map(f64::exp)?
        };
        let kappa = a / dt;
        (kappa, var_i * kappa * kappa / var_factor(a))
    };
    let eta = m / v;
    let rho = m * kappa * eta;
    Ok(MomentEstimate { value: MarginalShotParams::new(rho, eta, kappa)?, warnings })
}

/// `(κΔ - 1 + e^{-κΔ}) / κ²`.
fn cross_factor(kappa: f64, dt: f64) -> f64 {
    var_factor(kappa * dt) / (2.0 * kappa * kappa)
}

/// Moment-matching start for the dependence parameter: solves
/// `cov(Y1, Y2) = ρ∥(δ) E_δ[X1 X2] (h(κ1) + h(κ2)) / (κ1 + κ2)`.
pub fn moment_match_copula(
    panel: &CountsPanel,
    exposure: &ExposureSeries,
    marginals: &[MarginalShotParams; 2],
) -> Result<MomentEstimate<f64>> {
    if panel.dim() != 2 {
        return Err(Error::UnimplementedDimension(panel.dim()));
    }
    let dt = panel.period_days() as f64;
    let (_, y1) = standardised(panel, exposure, 0)?;
    let (_, y2) = standardised(panel, exposure, 1)?;
    let (m1, m2) = (mean(&y1), mean(&y2));
    let cov = y1.iter().zip(&y2).map(|(a, b)| (a - m1) * (b - m2)).sum::<f64>() / (y1.len() - 1) as f64;
    let (k1, k2) = (marginals[0].kappa, marginals[1].kappa);
    let target = cov * (k1 + k2) / (cross_factor(k1, dt) + cross_factor(k2, dt));
    copula_from_common_moment(target, marginals)
}

/// `ρ∥(δ) E_δ[X1 X2]` for the Clayton family.
pub fn common_cross_moment(delta: f64, marginals: &[MarginalShotParams; 2]) -> Result<f64> {
    let c = Clayton::new(delta)?;
    let tails = [marginals[0].tail(), marginals[1].tail()];
    let dec = decompose_rates(&c, tails[0].rho, tails[1].rho)?;
    if dec.rho_common <= 0.0 {
        return Ok(0.0);
    }
    Ok(dec.rho_common * mean_cross_product(&tails, &c)?)
}

fn copula_from_common_moment(target: f64, marginals: &[MarginalShotParams; 2]) -> Result<MomentEstimate<f64>> {
    let mut warnings = Vec::new();
    if !(target > 0.0) {
        let msg = "cross-covariance not positive; dependence set to its floor".to_string();
        warn!("{msg}");
        warnings.push(msg);
        return Ok(MomentEstimate { value: DELTA_FLOOR, warnings });
    }
    let f = |ld: f64| common_cross_moment(ld.exp(), marginals).unwrap_or(f64::NAN);
    let (lo, hi) = (DELTA_FLOOR.ln(), DELTA_CEILING.ln());
    if target <= f(lo) {
        let msg = "cross-covariance below the floor's implied value; dependence set to its floor".to_string();
        warn!("{msg}");
        warnings.push(msg);
        return Ok(MomentEstimate { value: DELTA_FLOOR, warnings });
    }
    if target >= f(hi) {
        let msg = "cross-covariance above the ceiling's implied value; dependence set to its ceiling".to_string();
        warn!("{msg}");
        warnings.push(msg);
        return Ok(MomentEstimate { value: DELTA_CEILING, warnings });
    }
    let ld = bisect(|ld| f(ld).ln(), lo, hi, target.ln(), 1e-9)?;
    Ok(MomentEstimate { value: ld.exp(), warnings })
}

/// Combines per-margin trajectories into one. Jumps of different inputs
/// closer than `threshold` days (or at the same time) become one jump at the
/// later time; others are padded with zeros.
pub fn merge_marginal_trajectories(trajs: &[Trajectory], threshold: f64) -> Result<Trajectory> {
    let first = trajs.first().ok_or_else(|| invalid("nothing to merge"))?;
    if threshold < 0.0 {
        return Err(invalid("merge threshold must be non-negative"));
    }
    let horizon = first.horizon();
    if trajs.iter().any(|t| (t.horizon() - horizon).abs() > 1e-9) {
        return Err(invalid("trajectories to merge must share a horizon"));
    }
    let mut acc = first.clone();
    for next in &trajs[1..] {
        acc = merge_pair(&acc, next, threshold)?;
    }
    Ok(acc)
}

fn merge_pair(a: &Trajectory, b: &Trajectory, threshold: f64) -> Result<Trajectory> {
    let (ga, gb) = (a.dim(), b.dim());
    let pad = |sizes: &[f64], left: bool| -> Sizes {
        let mut s: Sizes = std::iter::repeat_n(0.0, ga + gb).collect();
        let off = if left { 0 } else { ga };
        s[off..off + sizes.len()].copy_from_slice(sizes);
        s
    };
    let (ja, jb) = (a.jumps(), b.jumps());
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::with_capacity(ja.len() + jb.len());
    while i < ja.len() || j < jb.len() {
        match (ja.get(i), jb.get(j)) {
            (Some(x), Some(y)) if x.time == y.time || (x.time - y.time).abs() < threshold => {
                let mut s = pad(&x.sizes, true);
                s[ga..].copy_from_slice(&y.sizes);
                out.push(JumpEvent { time: x.time.max(y.time), sizes: s });
                i += 1;
                j += 1;
            }
            (Some(x), Some(y)) if x.time <= y.time => {
                out.push(JumpEvent { time: x.time, sizes: pad(&x.sizes, true) });
                i += 1;
            }
            (_, Some(y)) => {
                out.push(JumpEvent { time: y.time, sizes: pad(&y.sizes, false) });
                j += 1;
            }
            (Some(x), None) => {
                out.push(JumpEvent { time: x.time, sizes: pad(&x.sizes, true) });
                i += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    let initial: Sizes = a.initial_values().iter().chain(b.initial_values()).copied().collect();
    Trajectory::from_unsorted(initial, out, a.horizon())
}

/// Per-sample summaries needed by the marginal M-step.
#[derive(Debug, Clone)]
struct MarginalSample {
    n: f64,
    size_sum: f64,
    lambda0: f64,
    times: Vec<f64>,
    sizes: Vec<f64>,
}

impl MarginalSample {
    fn from_state(state: &ChainState) -> Self {
        let (times, sizes): (Vec<f64>, Vec<f64>) = state.jumps().iter().map(|j| (j.time, j.sizes[0])).unzip();
        Self { n: times.len() as f64, size_sum: sizes.iter().sum(), lambda0: state.initial()[0], times, sizes }
    }

    fn log_conditional(&self, kappa: f64, panel: &CountsPanel, weights: &[f64]) -> f64 {
        let mut acc = DailyAccumulator::new(panel.num_days(), kappa);
        for (&t, &x) in self.times.iter().zip(&self.sizes) {
            acc.add(t, x);
        }
        let daily = acc.finish(self.lambda0);
        let masses = weight_and_bin(&daily, weights, panel.period_days());
        sum_logprob(panel, std::slice::from_ref(&masses))
    }
}

/// Sample averages entering the shot-arrival, size and initial-value parts of Q.
#[derive(Debug, Clone, Copy)]
struct MarginalStats {
    n: f64,
    size_sum: f64,
    lambda0: f64,
    ln_lambda0: f64,
}

impl MarginalStats {
    fn of(samples: &[MarginalSample]) -> Self {
        let k = samples.len() as f64;
        Self {
            n: samples.iter().map(|s| s.n).sum::<f64>() / k,
            size_sum: samples.iter().map(|s| s.size_sum).sum::<f64>() / k,
            lambda0: samples.iter().map(|s| s.lambda0).sum::<f64>() / k,
            ln_lambda0: samples.iter().map(|s| s.lambda0.ln()).sum::<f64>() / k,
        }
    }

    /// Q without the count likelihood.
    fn prior_part(&self, p: &MarginalShotParams, horizon: f64) -> f64 {
        let shape = p.rho / p.kappa;
        self.n * p.rho.ln() - p.rho * horizon + self.n * p.eta.ln() - p.eta * self.size_sum + shape * p.eta.ln()
            - ln_gamma(shape)
            + (shape - 1.0) * self.ln_lambda0
            - p.eta * self.lambda0
    }

    fn eta_update(&self, rho: f64, kappa: f64) -> f64 {
        (self.n + rho / kappa) / (self.size_sum + self.lambda0)
    }

    fn rho_update(&self, eta: f64, kappa: f64, horizon: f64) -> Result<f64> {
        let score = |rho: f64| self.n / rho - horizon + (self.ln_lambda0 + eta.ln() - digamma(rho / kappa)) / kappa;
        let mut hi = (self.n / horizon).max(1e-8) * 2.0 + 1.0;
        while score(hi) > 0.0 {
            hi *= 2.0;
            if hi > 1e12 {
                return Err(Error::Numeric("shot rate update diverged".into()));
            }
        }
        let mut lo = hi;
        while score(lo) < 0.0 {
            lo /= 2.0;
            if lo < 1e-300 {
                return Err(Error::Numeric("shot rate update collapsed".into()));
            }
        }
        bisect(score, lo, hi, 0.0, 1e-12 * hi)
    }
}

struct MarginalQ<'a> {
    samples: &'a [MarginalSample],
    stats: MarginalStats,
    panel: &'a CountsPanel,
    weights: &'a [f64],
}

impl MarginalQ<'_> {
    fn count_part(&self, kappa: f64) -> f64 {
        let total: KahanSum =
            self.samples.par_iter().map(|s| s.log_conditional(kappa, self.panel, self.weights)).collect::<Vec<_>>().into_iter().collect();
        total.value() / self.samples.len() as f64
    }

    fn value(&self, p: &MarginalShotParams) -> f64 {
        self.stats.prior_part(p, self.panel.horizon()) + self.count_part(p.kappa)
    }

    /// Conditional maximisation: κ by golden section, then (ρ, η) by
    /// alternating exact updates.
    fn maximise(&self, p: &MarginalShotParams) -> Result<MarginalShotParams> {
        let horizon = self.panel.horizon();
        let (lk, _) = golden_max(
            |lk| {
                let k = lk.exp();
                let q = MarginalShotParams { kappa: k, ..*p };
                self.stats.prior_part(&q, horizon) + self.count_part(k)
            },
            (p.kappa / 4.0).max(KAPPA_FLOOR).ln(),
            (p.kappa * 4.0).ln(),
            1e-6,
        );
        let kappa = lk.exp();
        let mut rho = p.rho;
        let mut eta = p.eta;
        for _ in 0..200 {
            let new_eta = self.stats.eta_update(rho, kappa);
            let new_rho = self.stats.rho_update(new_eta, kappa, horizon)?;
            let done = ((new_rho - rho) / rho).abs() < 1e-13 && ((new_eta - eta) / eta).abs() < 1e-13;
            rho = new_rho;
            eta = new_eta;
            if done {
                break;
            }
        }
        MarginalShotParams::new(rho, eta, kappa)
    }
}

fn relative_change(new: f64, old: f64) -> f64 {
    (new - old) / old
}

fn acceptance(d: &FilterDiagnostics) -> [f64; 5] {
    let mut out = [0.0; 5];
    for (o, m) in out.iter_mut().zip(&d.moves) {
        *o = m.rate();
    }
    out
}

/// Fits one margin by MCEM. Without `start` the moment-matching estimate is
/// used; without `initial` the chain starts from a prior draw.
pub fn fit_marginal(
    panel: &CountsPanel,
    exposure: &ExposureSeries,
    config: &EmConfig,
    start: Option<MarginalShotParams>,
    initial: Option<&Trajectory>,
) -> Result<MarginalFit> {
    config.validate()?;
    if panel.dim() != 1 || exposure.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: panel.dim().max(exposure.dim()) });
    }
    let mut warnings = Vec::new();
    let mut params = match start {
        Some(p) => p,
        None => {
            let mm = moment_match_marginal(panel, exposure, 0)?;
            warnings.extend(mm.warnings);
            mm.value
        }
    };
    let horizon = panel.horizon();
    let mut current = match initial {
        Some(t) => t.clone(),
        None => {
            let law = ExponentialShots::new(params.rho, params.eta)?;
            simulate_trajectory(&[params], &law, horizon, &mut rng::stream(config.seed, streams::PRIOR_DRAW))?
        }
    };
    let weights = exposure.margin(0)[..panel.num_days()].to_vec();
    let mut trace = FitTrace::default();
    let mut final_samples = Vec::new();
    let mut diagnostics = FilterDiagnostics::default();
    for it in 1..=config.em_iters {
        let law = ExponentialShots::new(params.rho, params.eta)?;
        let plist = [params];
        let obs = PoissonCounts::new(panel.clone(), exposure.clone(), &plist)?;
        let mut sampler = Sampler::new(&law, &plist, Box::new(obs), &current, iteration_seed(config.seed, it))?;
        let mut samples = Vec::with_capacity(config.samples);
        let keep = it == config.em_iters;
        let mut kept = Vec::new();
        sampler.run(&config.filter_config(it), |_, state, _| {
            samples.push(MarginalSample::from_state(state));
            if keep {
                kept.push(state.to_trajectory()?);
            }
            Ok(())
        })?;
        diagnostics = sampler.diagnostics();
        current = sampler.state().to_trajectory()?;
        let q = MarginalQ { stats: MarginalStats::of(&samples), samples: &samples, panel, weights: &weights };
        let q_previous = q.value(&params);
        let (new, flagged) = match q.maximise(&params) {
            Ok(p) => (p, false),
            Err(e) => {
                let msg = format!("iteration {it}: M-step failed ({e}); keeping previous parameters");
                warn!("{msg}");
                warnings.push(msg);
                (params, true)
            }
        };
        let q_new = q.value(&new);
        trace.records.push(TraceRecord {
            iteration: it,
            values: vec![("rho".into(), new.rho), ("eta".into(), new.eta), ("kappa".into(), new.kappa)],
            relative_changes: vec![
                relative_change(new.rho, params.rho),
                relative_change(new.eta, params.eta),
                relative_change(new.kappa, params.kappa),
            ],
            q_previous,
            q_new,
            flagged,
            acceptance: acceptance(&diagnostics),
        });
        log::info!("marginal EM {it}/{}: rho={:.4} eta={:.4} kappa={:.4}", config.em_iters, new.rho, new.eta, new.kappa);
        params = new;
        if keep {
            final_samples = kept;
        }
    }
    Ok(MarginalFit { params, trace, samples: final_samples, final_state: current, diagnostics, warnings })
}

/// Fits every margin of `panel` independently, in parallel.
pub fn fit_marginals(panel: &CountsPanel, exposure: &ExposureSeries, config: &EmConfig) -> Result<Vec<MarginalFit>> {
    (0..panel.dim())
        .into_par_iter()
        .map(|g| {
            let cfg = EmConfig { seed: config.seed.wrapping_add(1000 * (g as u64 + 1)), ..config.clone() };
            fit_marginal(&panel.select(&[g])?, &exposure.select(&[g])?, &cfg, None, None)
        })
        .collect()
}

/// Per-jump log tail masses, fixed while the margins are fixed.
#[derive(Debug, Clone, Default)]
struct CopulaSample {
    common: Vec<(f64, f64)>,
    unique: [Vec<f64>; 2],
}

impl CopulaSample {
    fn from_state(state: &ChainState, tails: &[MarginalTail; 2]) -> Self {
        let mut s = CopulaSample::default();
        for j in state.jumps() {
            match Pattern::of(&j.sizes) {
                Ok(Pattern::Common) => s.common.push((tails[0].ln_value(j.sizes[0]), tails[1].ln_value(j.sizes[1]))),
                Ok(Pattern::Unique(g)) => s.unique[g].push(tails[g].ln_value(j.sizes[g])),
                Err(_) => {}
            }
        }
        s
    }
}

/// Averaged δ-dependent part of Q: `Σ ln(ρ-weighted size density) - ρ(δ) T`.
fn copula_objective(delta: f64, samples: &[CopulaSample], tails: &[MarginalTail; 2], horizon: f64) -> f64 {
    let Ok(c) = Clayton::new(delta) else { return f64::NEG_INFINITY };
    let (lr1, lr2) = (tails[0].rho.ln(), tails[1].rho.ln());
    let rho_common = c.ln_value(lr1, lr2).exp();
    let total_rate = tails[0].rho + tails[1].rho - rho_common;
    let per: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let mut acc = KahanSum::default();
            for &(lu, lv) in &s.common {
                acc.add(c.ln_d12(lu, lv));
            }
            for &lu in &s.unique[0] {
                acc.add(c.ln_one_minus_d1(lu, lr2));
            }
            for &lv in &s.unique[1] {
                acc.add(c.ln_one_minus_d1(lv, lr1));
            }
            acc.value()
        })
        .collect();
    per.iter().sum::<f64>() / samples.len() as f64 - total_rate * horizon
}

/// Fits the Clayton parameter by MCEM with `marginals` held fixed.
pub fn fit_copula(
    panel: &CountsPanel,
    exposure: &ExposureSeries,
    marginals: &[MarginalShotParams; 2],
    config: &EmConfig,
    start: Option<f64>,
    initial: Option<&Trajectory>,
) -> Result<CopulaFit> {
    config.validate()?;
    if panel.dim() != 2 || exposure.dim() != 2 {
        return Err(Error::UnimplementedDimension(panel.dim()));
    }
    let fixed = *marginals;
    let mut warnings = Vec::new();
    let mut delta = match start {
        Some(d) => d,
        None => {
            let mm = moment_match_copula(panel, exposure, marginals)?;
            warnings.extend(mm.warnings);
            mm.value
        }
    };
    let tails = [marginals[0].tail(), marginals[1].tail()];
    let horizon = panel.horizon();
    let mut current = match initial {
        Some(t) => t.clone(),
        None => {
            let law = CopulaShots::new(tails, Box::new(Clayton::new(delta)?))?;
            simulate_trajectory(marginals, &law, horizon, &mut rng::stream(config.seed, streams::PRIOR_DRAW))?
        }
    };
    let mut trace = FitTrace::default();
    let mut final_samples = Vec::new();
    let mut diagnostics = FilterDiagnostics::default();
    for it in 1..=config.em_iters {
        let law = CopulaShots::new(tails, Box::new(Clayton::new(delta)?))?;
        let obs = PoissonCounts::new(panel.clone(), exposure.clone(), marginals)?;
        let mut sampler = Sampler::new(&law, marginals, Box::new(obs), &current, iteration_seed(config.seed, it))?;
        let mut samples = Vec::with_capacity(config.samples);
        let keep = it == config.em_iters;
        let mut kept = Vec::new();
        sampler.run(&config.filter_config(it), |_, state, _| {
            samples.push(CopulaSample::from_state(state, &tails));
            if keep {
                kept.push(state.to_trajectory()?);
            }
            Ok(())
        })?;
        diagnostics = sampler.diagnostics();
        current = sampler.state().to_trajectory()?;
        let q_previous = copula_objective(delta, &samples, &tails, horizon);
        let lo = (delta / 4.0).max(DELTA_FLOOR).ln();
        let hi = (delta * 4.0).min(DELTA_CEILING).ln();
        let (ld, q_new) = golden_max(|ld| copula_objective(ld.exp(), &samples, &tails, horizon), lo, hi, 1e-6);
        let (new, q_new, flagged) = if q_new.is_finite() && q_new >= q_previous {
            (ld.exp(), q_new, false)
        } else if q_new.is_finite() {
            (delta, q_previous, false)
        } else {
            let msg = format!("iteration {it}: dependence M-step failed; keeping previous value");
            warn!("{msg}");
            warnings.push(msg);
            (delta, q_previous, true)
        };
        trace.records.push(TraceRecord {
            iteration: it,
            values: vec![("delta".into(), new)],
            relative_changes: vec![relative_change(new, delta)],
            q_previous,
            q_new,
            flagged,
            acceptance: acceptance(&diagnostics),
        });
        log::info!("copula EM {it}/{}: delta={new:.5}", config.em_iters);
        delta = new;
        if keep {
            final_samples = kept;
        }
    }
    assert_eq!(fixed, *marginals, "margins must stay fixed while fitting the dependence");
    Ok(CopulaFit { delta, marginals: fixed, trace, samples: final_samples, final_state: current, diagnostics, warnings })
}

/// A Lévy-copula shot law for fitted margins.
pub fn copula_law(marginals: &[MarginalShotParams; 2], copula: Box<dyn LevyCopula>) -> Result<CopulaShots> {
    CopulaShots::new([marginals[0].tail(), marginals[1].tail()], copula)
}

/// Boxed shot law for one or two margins.
pub fn shot_law(marginals: &[MarginalShotParams], delta: Option<f64>) -> Result<Box<dyn ShotLaw>> {
    match (marginals, delta) {
        ([p], _) => Ok(Box::new(ExponentialShots::new(p.rho, p.eta)?)),
        ([a, b], Some(d)) => Ok(Box::new(copula_law(&[*a, *b], Box::new(Clayton::new(d)?))?)),
        ([_, _], None) => Err(Error::Config("two margins need a dependence parameter".into())),
        (m, _) => Err(Error::UnimplementedDimension(m.len())),
    }
}
