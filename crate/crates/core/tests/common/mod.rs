//! Shared fixtures and goodness-of-fit helpers for the integration tests.
#![allow(dead_code)]

use shotcox::law::ShotLaw;
use shotcox::levy::Clayton;
use shotcox::likelihood::{period_masses, simulate_counts, CountsPanel, ExposureSeries};
use shotcox::mcem::copula_law;
use shotcox::rng::{self, streams};
use shotcox::shot::{simulate_trajectory, JumpEvent, MarginalShotParams, Trajectory};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Fitted New South Wales and Victoria parameters used as the reference
/// setting throughout.
pub fn reference_params() -> [MarginalShotParams; 2] {
    [MarginalShotParams::new(33.77, 0.17, 2.37).unwrap(), MarginalShotParams::new(18.74, 0.18, 1.28).unwrap()]
}

pub const REFERENCE_DELTA: f64 = 0.4214;

/// Target daily claim means of the reference panel.
pub const DAILY_MEANS: [f64; 2] = [85.0, 81.0];

/// Constant exposure giving each margin its target daily mean.
pub fn reference_exposure_levels(p: &[MarginalShotParams; 2]) -> [f64; 2] {
    [DAILY_MEANS[0] / p[0].stationary_mean(), DAILY_MEANS[1] / p[1].stationary_mean()]
}

/// A simulated bivariate daily panel with its latent truth.
pub struct Scenario {
    pub params: [MarginalShotParams; 2],
    pub delta: f64,
    pub law: Box<dyn ShotLaw>,
    pub truth: Trajectory,
    pub exposure: ExposureSeries,
    pub panel: CountsPanel,
    pub true_masses: Vec<Vec<f64>>,
}

pub fn reference_scenario(days: usize, seed: u64) -> Scenario {
    let params = reference_params();
    let law: Box<dyn ShotLaw> = Box::new(copula_law(&params, Box::new(Clayton::new(REFERENCE_DELTA).unwrap())).unwrap());
    let mut r = rng::stream(seed, streams::SIMULATION);
    let truth = simulate_trajectory(&params, law.as_ref(), days as f64, &mut r).unwrap();
    let w = reference_exposure_levels(&params);
    let exposure = ExposureSeries::new(vec![vec![w[0]; days], vec![w[1]; days]]).unwrap();
    let mut rc = rng::stream(seed, streams::COUNTS);
    let panel = simulate_counts(&truth, &params, &exposure, 1, days, &mut rc).unwrap();
    let true_masses = period_masses(&truth, &params, &exposure, 1, days).unwrap();
    Scenario { params, delta: REFERENCE_DELTA, law, truth, exposure, panel, true_masses }
}

/// Intensities of every margin at the increasing `times`, by one pass over
/// the time-ordered `jumps`.
pub fn intensities_at(initial: &[f64], jumps: &[JumpEvent], kappa: &[f64], times: &[f64]) -> Vec<Vec<f64>> {
    let g = initial.len();
    let mut level = initial.to_vec();
    let mut now = 0.0;
    let mut next = 0;
    let mut out = vec![Vec::with_capacity(times.len()); g];
    for &t in times {
        while next < jumps.len() && jumps[next].time <= t {
            let j = &jumps[next];
            for m in 0..g {
                level[m] = level[m] * (-kappa[m] * (j.time - now)).exp() + j.sizes[m];
            }
            now = j.time;
            next += 1;
        }
        for m in 0..g {
            level[m] *= (-kappa[m] * (t - now)).exp();
            out[m].push(level[m]);
        }
        now = t;
    }
    out
}

/// Asymptotic Kolmogorov survival function with the small-sample
/// correction of Stephens.
fn kolmogorov_sf(d: f64, n_eff: f64) -> f64 {
    let s = n_eff.sqrt();
    let lambda = (s + 0.12 + 0.11 / s) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov statistic and p-value.
pub fn ks_one_sample(sample: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let d = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    (d, kolmogorov_sf(d, n))
}

/// Two-sample Kolmogorov–Smirnov statistic and p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    (d, kolmogorov_sf(d, na * nb / (na + nb)))
}

/// Pearson chi-square p-value of `observed` counts against `expected`.
pub fn chi_square_pvalue(observed: &[f64], expected: &[f64], constrained: usize) -> f64 {
    let stat: f64 = observed.iter().zip(expected).map(|(o, e)| (o - e) * (o - e) / e).sum();
    let df = (observed.len() - 1 - constrained) as f64;
    1.0 - ChiSquared::new(df).unwrap().cdf(stat)
}

/// `1 - SS_res / SS_tot` of `fitted` against `truth`.
pub fn r_squared(fitted: &[f64], truth: &[f64]) -> f64 {
    let m = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_res: f64 = fitted.iter().zip(truth).map(|(f, t)| (f - t) * (f - t)).sum();
    let ss_tot: f64 = truth.iter().map(|t| (t - m) * (t - m)).sum();
    1.0 - ss_res / ss_tot
}
