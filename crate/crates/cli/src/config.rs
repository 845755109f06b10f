//! Plain-text `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::NaiveDate;

use crate::failure::{fail, Category};

/// Every accepted key with its default (empty means unset) and a one-line
/// description. Per-margin design keys may also be given as `key.<margin>`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("window_start", "", "first observation day, YYYY-MM-DD"),
    ("window_end", "", "last observation day (inclusive), YYYY-MM-DD"),
    ("period_days", "1", "days per observation period"),
    ("margins", "", "comma-separated margin ids"),
    ("claims_file", "claims.csv", "claims CSV (date,margin), relative to the config file"),
    ("exposure_file", "exposure.csv", "policy counts CSV (date,margin,policy_count), relative to the config file"),
    ("holidays", "", "comma-separated holiday dates"),
    ("trend", "days", "trend column unit: days or years"),
    ("month_encodings", "grouped,spline", "candidate month encodings compared by AIC"),
    ("month_groups", "0,0,0,1,1,1,1,1,1,0,0,0", "group label per calendar month for the grouped encoding"),
    ("spline_knots", "", "knots in months for the spline encoding; empty means month boundaries"),
    ("em_iters", "150", "MCEM iterations"),
    ("mcmc_iters", "20000", "RJMCMC sweeps per E-step"),
    ("em_samples", "100", "states kept per E-step"),
    ("burn_fraction", "0.5", "leading fraction of sweeps discarded"),
    ("sweep_len", "", "proposals per sweep; empty means one per period"),
    ("convergence_window", "50", "trailing iterations summarised in the trace"),
    ("merge_threshold", "0.01", "days within which marginal jumps are merged"),
    ("filter_iters", "20000", "RJMCMC sweeps for the final filter"),
    ("filter_samples", "100", "posterior states kept by the final filter"),
    ("credible_level", "0.9", "level of posterior mass bands"),
    ("acf_max_lag", "20", "largest lag in autocorrelation tables"),
    ("copula_grid", "10", "cells per side of empirical copula grids"),
    ("horizon", "365", "prediction horizon in days"),
    ("n_sims", "100000", "prediction simulations"),
    ("seed", "0", "seed for all randomness"),
    ("sim_rho", "33.77,18.74", "simulation: shot rate per margin"),
    ("sim_eta", "0.17,0.18", "simulation: exponential size rate per margin"),
    ("sim_kappa", "2.37,1.28", "simulation: decay rate per margin"),
    ("sim_delta", "0.4214", "simulation: Clayton parameter"),
    ("sim_daily_mean", "85,81", "simulation: target mean daily claims per margin"),
    ("sim_policies", "1000,1000", "simulation: constant policies in force per margin"),
];

const PER_MARGIN: &[&str] = &["month_encodings", "month_groups", "spline_knots", "holidays", "trend"];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
    base_dir: std::path::PathBuf,
}

fn known(key: &str) -> bool {
    if KEYS.iter().any(|k| k.0 == key) {
        return true;
    }
    matches!(key.split_once('.'), Some((base, m)) if PER_MARGIN.contains(&base) && !m.is_empty())
}

impl Config {
    pub fn defaults() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
            base_dir: std::path::PathBuf::from("."),
        }
    }

    pub fn parse(text: &str, base_dir: &std::path::Path) -> anyhow::Result<Self> {
        let mut cfg = Self::defaults();
        cfg.base_dir = base_dir.to_path_buf();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(fail(Category::Config, format!("line {}: expected key = value", n + 1)));
            };
            cfg.set(k.trim(), v.trim()).map_err(|e| fail(Category::Config, format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        if !known(key) {
            return Err(fail(Category::Config, format!("unknown key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> anyhow::Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| fail(Category::Config, format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Canonical `key=value` dump of the effective configuration.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    /// Per-margin value if present, else the shared one.
    pub fn raw_for(&self, key: &str, margin: &str) -> &str {
        self.values.get(&format!("{key}.{margin}")).map(String::as_str).unwrap_or_else(|| self.raw(key))
    }

    pub fn path(&self, key: &str) -> std::path::PathBuf {
        self.base_dir.join(self.raw(key))
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> anyhow::Result<T> {
        let v = self.raw(key);
        v.parse().map_err(|_| fail(Category::Config, format!("{key} = {v:?} is not valid")))
    }

    pub fn optional<T: std::str::FromStr>(&self, key: &str) -> anyhow::Result<Option<T>> {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn list<T: std::str::FromStr>(&self, key: &str) -> anyhow::Result<Vec<T>> {
        parse_list(key, self.raw(key))
    }

    pub fn date(&self, key: &str) -> anyhow::Result<NaiveDate> {
        let v = self.raw(key);
        if v.is_empty() {
            return Err(fail(Category::Config, format!("{key} is required")));
        }
        NaiveDate::parse_from_str(v, "%Y-%m-%d").map_err(|_| fail(Category::Config, format!("{key} = {v:?} is not a YYYY-MM-DD date")))
    }

    pub fn margins(&self) -> anyhow::Result<Vec<String>> {
        let m: Vec<String> = self.list("margins")?;
        if m.is_empty() {
            return Err(fail(Category::Config, "margins is required"));
        }
        let mut sorted = m.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != m.len() {
            return Err(fail(Category::Config, "margin ids must be distinct"));
        }
        Ok(m)
    }

    /// Observation window as (first day, number of days).
    pub fn window(&self) -> anyhow::Result<(NaiveDate, usize)> {
        let (s, e) = (self.date("window_start")?, self.date("window_end")?);
        if e < s {
            return Err(fail(Category::Config, "window_end precedes window_start"));
        }
        let days = (e - s).num_days() as usize + 1;
        let pd: usize = self.get("period_days")?;
        if pd == 0 || days % pd != 0 {
            return Err(fail(Category::Config, format!("window of {days} days is not a whole number of {pd}-day periods")));
        }
        Ok((s, days))
    }
}

pub fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> anyhow::Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| fail(Category::Config, format!("{key}: {s:?} is not valid"))))
        .collect()
}

/// The documented key set, one `key = default  # description` line each.
pub fn documentation() -> String {
    let mut s = String::new();
    for (k, v, d) in KEYS {
        let _ = writeln!(s, "{k} = {v}  # {d}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_unknown_keys() {
        let c = Config::parse("margins = A,B # two\nseed=7\n\nmonth_groups.A = 0,0,0,0,0,0,1,1,1,1,1,1", std::path::Path::new(".")).unwrap();
        assert_eq!(c.margins().unwrap(), vec!["A", "B"]);
        assert_eq!(c.get::<u64>("seed").unwrap(), 7);
        assert_eq!(c.raw_for("month_groups", "A"), "0,0,0,0,0,0,1,1,1,1,1,1");
        assert_eq!(c.raw_for("month_groups", "B"), "0,0,0,1,1,1,1,1,1,0,0,0");
        assert!(Config::parse("colour = red", std::path::Path::new(".")).is_err());
        assert!(Config::parse("just text", std::path::Path::new(".")).is_err());
    }

    #[test]
    fn window_must_tile_periods() {
        let mut c = Config::defaults();
        c.set("window_start", "2020-01-01").unwrap();
        c.set("window_end", "2020-01-10").unwrap();
        assert_eq!(c.window().unwrap().1, 10);
        c.set("period_days", "3").unwrap();
        assert!(c.window().is_err());
    }
}
