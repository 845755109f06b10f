//! Sample dependence measures, ranks and autocorrelation.

use crate::error::{invalid, Error, Result};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    if x.len() < 2 {
        return Err(invalid("need at least two observations"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid("observations must be finite"));
    }
    Ok(())
}

fn constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (divisor `n - 1`).
pub fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)).sqrt()
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    if constant(x) || constant(y) {
        return Err(Error::Undefined("correlation of a constant series".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Number of tied pairs within runs of equal values of a sorted sequence.
fn tied_pairs<T: PartialEq>(sorted: impl Iterator<Item = T>) -> u64 {
    let mut total = 0u64;
    let mut run = 0u64;
    let mut prev: Option<T> = None;
    for v in sorted {
        if prev.as_ref() == Some(&v) {
            run += 1;
        } else {
            total += run * (run + 1) / 2;
            run = 0;
        }
        prev = Some(v);
    }
    total + run * (run + 1) / 2
}

/// Sorts `v` and returns the number of inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall's tau-b by pair counting in `O(n log n)`.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    if constant(x) || constant(y) {
        return Err(Error::Undefined("Kendall's tau of a constant series".into()));
    }
    let n = x.len() as u64;
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
    let ties_x = tied_pairs(idx.iter().map(|&i| x[i]));
    let ties_xy = tied_pairs(idx.iter().map(|&i| (x[i], y[i])));
    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let mut buf = vec![0.0; ys.len()];
    let swaps = merge_count(&mut ys, &mut buf);
    let ties_y = tied_pairs(ys.iter().copied());
    let n0 = n * (n - 1) / 2;
    let num = n0 as f64 - ties_x as f64 - ties_y as f64 + ties_xy as f64 - 2.0 * swaps as f64;
    Ok(num / (((n0 - ties_x) as f64) * ((n0 - ties_y) as f64)).sqrt())
}

/// Sample autocorrelations for lags `0..=max_lag` and the `±2/√L` band.
#[derive(Debug, Clone, PartialEq)]
pub struct Acf {
    pub values: Vec<f64>,
    pub band: f64,
}

impl Acf {
    /// Lags `1..=max_lag` whose autocorrelation lies inside the band.
    pub fn inside_band(&self) -> usize {
        self.values[1..].iter().filter(|v| v.abs() <= self.band).count()
    }
}

pub fn acf(series: &[f64], max_lag: usize) -> Result<Acf> {
    let n = series.len();
    if n <= max_lag {
        return Err(invalid(format!("series of length {n} too short for lag {max_lag}")));
    }
    if constant(series) {
        return Err(Error::Undefined("autocorrelation of a constant series".into()));
    }
    let m = mean(series);
    let c0: f64 = series.iter().map(|v| (v - m) * (v - m)).sum();
    let values = (0..=max_lag)
        .map(|k| series[..n - k].iter().zip(&series[k..]).map(|(a, b)| (a - m) * (b - m)).sum::<f64>() / c0)
        .collect();
    Ok(Acf { values, band: 2.0 / (n as f64).sqrt() })
}
