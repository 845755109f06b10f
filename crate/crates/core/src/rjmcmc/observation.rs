//! Observation models: how a proposed state change alters the likelihood of
//! the observed counts.

use crate::error::{Error, Result};
use crate::likelihood::{sum_logprob, weight_and_bin, CountsPanel, ExposureSeries};
use crate::shot::{decay_integral, DailyAccumulator, MarginalShotParams, Sizes};

use super::moves::Change;
use super::state::ChainState;

/// Contributions smaller than this fraction of the day's integral are
/// dropped from incremental updates; full recomputes clear the residue.
const TRUNCATION: f64 = 1e-13;

/// Masses below this are treated as zero.
pub const MASS_FLOOR: f64 = 1e-300;

pub trait ObservationModel: Send {
    /// Recomputes all cached quantities for `state`.
    fn reset(&mut self, state: &ChainState) -> Result<()>;

    /// Stages `change` against `state` and returns the log-likelihood ratio.
    fn stage(&mut self, change: &Change, state: &ChainState) -> f64;

    /// Makes the staged change permanent.
    fn commit(&mut self);

    /// Drops the staged change.
    fn discard(&mut self);

    fn log_likelihood(&self) -> f64;

    /// Proposals per sweep when the configuration does not say.
    fn sweep_hint(&self) -> usize;

    /// Proposals rejected because a mass fell below [`MASS_FLOOR`] with a
    /// positive count.
    fn floored(&self) -> u64 {
        0
    }

    /// Current exposure-weighted period masses, if the model keeps them.
    fn masses(&self) -> Option<&[Vec<f64>]> {
        None
    }
}

/// Constant likelihood: the sampler then targets the prior.
#[derive(Debug, Default, Clone, Copy)]
pub struct Flat;

impl ObservationModel for Flat {
    fn reset(&mut self, _state: &ChainState) -> Result<()> {
        Ok(())
    }

    fn stage(&mut self, _change: &Change, _state: &ChainState) -> f64 {
        0.0
    }

    fn commit(&mut self) {}

    fn discard(&mut self) {}

    fn log_likelihood(&self) -> f64 {
        0.0
    }

    fn sweep_hint(&self) -> usize {
        1
    }
}

/// Conditionally Poisson counts with cached daily integrals and period masses.
#[derive(Debug, Clone)]
pub struct PoissonCounts {
    panel: CountsPanel,
    exposure: ExposureSeries,
    kappa: Sizes,
    one_day: Sizes,
    step: Sizes,
    daily: Vec<Vec<f64>>,
    masses: Vec<Vec<f64>>,
    ll: f64,
    day_delta: Vec<Vec<f64>>,
    day_touched: Vec<(u32, u32)>,
    day_mark: Vec<Vec<bool>>,
    period_delta: Vec<Vec<f64>>,
    period_touched: Vec<(u32, u32)>,
    period_mark: Vec<Vec<bool>>,
    staged_ll: f64,
    floored: u64,
}

impl PoissonCounts {
    pub fn new(panel: CountsPanel, exposure: ExposureSeries, params: &[MarginalShotParams]) -> Result<Self> {
        let g = panel.dim();
        if params.len() != g || exposure.dim() != g {
            return Err(Error::DimensionMismatch { expected: g, got: params.len().min(exposure.dim()) });
        }
        let days = panel.num_days();
        if exposure.num_days() < days {
            return Err(Error::DimensionMismatch { expected: days, got: exposure.num_days() });
        }
        let l = panel.num_periods();
        let kappa: Sizes = params.iter().map(|p| p.kappa).collect();
        Ok(Self {
            one_day: kappa.iter().map(|&k| decay_integral(k, 1.0)).collect(),
            step: kappa.iter().map(|&k| (-k).exp()).collect(),
            kappa,
            daily: vec![vec![0.0; days]; g],
            masses: vec![vec![0.0; l]; g],
            ll: 0.0,
            day_delta: vec![vec![0.0; days]; g],
            day_touched: Vec::new(),
            day_mark: vec![vec![false; days]; g],
            period_delta: vec![vec![0.0; l]; g],
            period_touched: Vec::new(),
            period_mark: vec![vec![false; l]; g],
            staged_ll: 0.0,
            floored: 0,
            panel,
            exposure,
        })
    }

    pub fn panel(&self) -> &CountsPanel {
        &self.panel
    }

    pub fn daily_integrals(&self) -> &[Vec<f64>] {
        &self.daily
    }

    fn touch(&mut self, g: usize, d: usize, v: f64) {
        if !self.day_mark[g][d] {
            self.day_mark[g][d] = true;
            self.day_touched.push((g as u32, d as u32));
        }
        self.day_delta[g][d] += v;
    }

    fn stage_atom(&mut self, time: f64, sizes: &[f64], sign: f64) {
        let days = self.daily.first().map_or(0, |d| d.len());
        if days == 0 {
            return;
        }
        for (g, &x) in sizes.iter().enumerate() {
            if x <= 0.0 {
                continue;
            }
            let x = sign * x;
            let k = self.kappa[g];
            let d0 = (time as usize).min(days - 1);
            let rest = (d0 as f64 + 1.0 - time).max(0.0);
            let decay = (-k * rest).exp();
            self.touch(g, d0, x * (1.0 - decay) / k);
            let mut level = x * decay;
            let (one_day, step) = (self.one_day[g], self.step[g]);
            for d in d0 + 1..days {
                let c = level * one_day;
                let base = if sign < 0.0 { self.daily[g][d] + c } else { self.daily[g][d] };
                self.touch(g, d, c);
                if c.abs() <= TRUNCATION * base.max(0.0) || c.abs() < MASS_FLOOR {
                    break;
                }
                level *= step;
            }
        }
    }

    fn clear_staged(&mut self) {
        for &(g, d) in &self.day_touched {
            self.day_delta[g as usize][d as usize] = 0.0;
            self.day_mark[g as usize][d as usize] = false;
        }
        for &(g, i) in &self.period_touched {
            self.period_delta[g as usize][i as usize] = 0.0;
            self.period_mark[g as usize][i as usize] = false;
        }
        self.day_touched.clear();
        self.period_touched.clear();
        self.staged_ll = 0.0;
    }
}

impl ObservationModel for PoissonCounts {
    fn reset(&mut self, state: &ChainState) -> Result<()> {
        self.clear_staged();
        let days = self.panel.num_days();
        for g in 0..self.panel.dim() {
            let mut acc = DailyAccumulator::new(days, self.kappa[g]);
            for j in state.jumps() {
                acc.add(j.time, j.sizes[g]);
            }
            self.daily[g] = acc.finish(state.initial()[g]);
            self.masses[g] = weight_and_bin(&self.daily[g], self.exposure.margin(g), self.panel.period_days());
        }
        self.ll = sum_logprob(&self.panel, &self.masses);
        Ok(())
    }

    fn stage(&mut self, change: &Change, _state: &ChainState) -> f64 {
        self.clear_staged();
        for (time, sizes, sign) in change.atoms() {
            self.stage_atom(time, sizes, sign);
        }
        let pd = self.panel.period_days();
        for t in 0..self.day_touched.len() {
            let (g, d) = self.day_touched[t];
            let (g, d) = (g as usize, d as usize);
            let i = d / pd;
            let dm = self.day_delta[g][d] * self.exposure.margin(g)[d];
            if !self.period_mark[g][i] {
                self.period_mark[g][i] = true;
                self.period_touched.push((g as u32, i as u32));
            }
            self.period_delta[g][i] += dm;
        }
        let mut total = 0.0;
        for &(g, i) in &self.period_touched {
            let (g, i) = (g as usize, i as usize);
            let m = self.masses[g][i];
            let dm = self.period_delta[g][i];
            let n = self.panel.get(g, i) as f64;
            let new = m + dm;
            if new <= MASS_FLOOR {
                if n > 0.0 {
                    self.floored += 1;
                    self.staged_ll = f64::NEG_INFINITY;
                    return f64::NEG_INFINITY;
                }
                total -= dm;
            } else if m <= MASS_FLOOR {
                total += -dm + n * (new.ln() - m.max(MASS_FLOOR).ln());
            } else {
                total += -dm + n * (dm / m).ln_1p();
            }
        }
        self.staged_ll = total;
        total
    }

    fn commit(&mut self) {
        for &(g, d) in &self.day_touched {
            let (g, d) = (g as usize, d as usize);
            self.daily[g][d] += self.day_delta[g][d];
        }
        for &(g, i) in &self.period_touched {
            let (g, i) = (g as usize, i as usize);
            self.masses[g][i] = (self.masses[g][i] + self.period_delta[g][i]).max(0.0);
        }
        self.ll += self.staged_ll;
        self.clear_staged();
    }

    fn discard(&mut self) {
        self.clear_staged();
    }

    fn log_likelihood(&self) -> f64 {
        self.ll
    }

    fn sweep_hint(&self) -> usize {
        self.panel.num_periods()
    }

    fn floored(&self) -> u64 {
        self.floored
    }

    fn masses(&self) -> Option<&[Vec<f64>]> {
        Some(&self.masses)
    }
}
