//! Metropolis–Hastings driver for the reversible-jump moves.

use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::law::ShotLaw;
use crate::likelihood::{CountsPanel, ExposureSeries};
use crate::rng::{self, streams, Rng};
use crate::shot::{simulate_trajectory, MarginalShotParams, Trajectory};

use super::moves::{select_move, standard_moves, Move, MoveContext, MoveKind};
use super::observation::{ObservationModel, PoissonCounts};
use super::state::ChainState;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    /// Number of sweeps.
    pub iterations: usize,
    /// Leading fraction of sweeps excluded from the selection.
    pub burn_fraction: f64,
    /// States kept, evenly spaced over the retained sweeps; the last is the
    /// final state.
    pub samples: usize,
    /// Proposals per sweep; defaults to the number of observation periods.
    pub sweep_len: Option<usize>,
    /// Sweeps between full likelihood recomputes.
    pub recompute_every: usize,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { iterations: 20_000, burn_fraction: 0.5, samples: 100, sweep_len: None, recompute_every: 10, seed: 0 }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.burn_fraction) {
            return Err(Error::Config(format!("burn fraction must lie in [0, 1), got {}", self.burn_fraction)));
        }
        if self.samples == 0 {
            return Err(Error::Config("at least one sample must be selected".into()));
        }
        let kept = self.iterations - self.burn_sweeps();
        if self.samples > kept {
            return Err(Error::Config(format!("cannot select {} samples from {kept} retained sweeps", self.samples)));
        }
        if self.sweep_len == Some(0) || self.recompute_every == 0 {
            return Err(Error::Config("sweep length and recompute interval must be positive".into()));
        }
        Ok(())
    }

    pub fn burn_sweeps(&self) -> usize {
        (self.iterations as f64 * self.burn_fraction).floor() as usize
    }
}

/// 1-based sweep counts after which states are recorded.
pub fn selection_sweeps(iterations: usize, burn_fraction: f64, samples: usize) -> Vec<usize> {
    let burn = (iterations as f64 * burn_fraction).floor() as usize;
    let span = iterations - burn;
    (1..=samples).map(|k| burn + k * span / samples).collect()
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MoveStats {
    pub proposed: u64,
    pub accepted: u64,
}

impl MoveStats {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct FilterDiagnostics {
    /// Indexed by [`MoveKind::index`].
    pub moves: [MoveStats; 5],
    /// Proposals with a NaN or `+inf` acceptance log.
    pub non_finite: u64,
    pub floored: u64,
    pub sweeps: usize,
    pub final_log_likelihood: f64,
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub samples: Vec<Trajectory>,
    pub final_state: Trajectory,
    pub diagnostics: FilterDiagnostics,
}

/// One reversible-jump chain.
pub struct Sampler<'a> {
    ctx: MoveContext<'a>,
    moves: Vec<Box<dyn Move>>,
    observation: Box<dyn ObservationModel + 'a>,
    state: ChainState,
    rng: Rng,
    diagnostics: FilterDiagnostics,
}

impl<'a> Sampler<'a> {
    pub fn new(
        law: &'a dyn ShotLaw,
        params: &'a [MarginalShotParams],
        observation: Box<dyn ObservationModel + 'a>,
        initial: &Trajectory,
        seed: u64,
    ) -> Result<Self> {
        if law.dim() != params.len() || initial.dim() != params.len() {
            return Err(Error::DimensionMismatch { expected: params.len(), got: initial.dim().min(law.dim()) });
        }
        let ctx = MoveContext { law, params, horizon: initial.horizon() };
        let state = ChainState::from_trajectory(initial);
        let mut observation = observation;
        observation.reset(&state)?;
        Ok(Self {
            ctx,
            moves: standard_moves(),
            observation,
            state,
            rng: rng::stream(seed, streams::FILTER),
            diagnostics: FilterDiagnostics::default(),
        })
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn observation(&self) -> &dyn ObservationModel {
        self.observation.as_ref()
    }

    pub fn diagnostics(&self) -> FilterDiagnostics {
        let mut d = self.diagnostics.clone();
        d.floored = self.observation.floored();
        d.final_log_likelihood = self.observation.log_likelihood();
        d
    }

    /// One proposal; returns the move and whether it was accepted, or
    /// `None` when the chosen move was unavailable.
    pub fn step(&mut self) -> Result<Option<(MoveKind, bool)>> {
        let kind = select_move(self.state.len(), &mut self.rng);
        let Some(mut proposal) = self.moves[kind.index()].propose(&self.ctx, &self.state, &mut self.rng)? else {
            return Ok(None);
        };
        if matches!(kind, MoveKind::S | MoveKind::P | MoveKind::H) {
            debug_assert_eq!(proposal.log_prior_ratio + proposal.log_proposal_ratio, 0.0);
        }
        debug_assert_eq!(proposal.log_jacobian, 0.0);
        proposal.log_likelihood_ratio = self.observation.stage(&proposal.change, &self.state);
        let stats = &mut self.diagnostics.moves[kind.index()];
        stats.proposed += 1;
        let log_alpha = proposal.log_acceptance();
        if log_alpha.is_nan() || log_alpha == f64::INFINITY {
            self.diagnostics.non_finite += 1;
            self.observation.discard();
            return Ok(Some((kind, false)));
        }
        let accept = log_alpha >= 0.0 || self.rng.random::<f64>().ln() < log_alpha;
        if accept {
            proposal.change.apply(&mut self.state)?;
            self.observation.commit();
            stats.accepted += 1;
        } else {
            self.observation.discard();
        }
        Ok(Some((kind, accept)))
    }

    pub fn sweep(&mut self, len: usize) -> Result<()> {
        for _ in 0..len {
            self.step()?;
        }
        self.diagnostics.sweeps += 1;
        Ok(())
    }

    /// Runs `config.iterations` sweeps and hands each selected state to `visit`.
    pub fn run<F>(&mut self, config: &FilterConfig, mut visit: F) -> Result<()>
    where
        F: FnMut(usize, &ChainState, &dyn ObservationModel) -> Result<()>,
    {
        config.validate()?;
        let len = config.sweep_len.unwrap_or_else(|| self.observation.sweep_hint().max(1));
        let selected = selection_sweeps(config.iterations, config.burn_fraction, config.samples);
        let mut next = 0;
        for s in 1..=config.iterations {
            self.sweep(len)?;
            if s % config.recompute_every == 0 || (next < selected.len() && selected[next] == s) {
                self.observation.reset(&self.state)?;
            }
            if next < selected.len() && selected[next] == s {
                visit(s, &self.state, self.observation.as_ref())?;
                next += 1;
            }
        }
        Ok(())
    }

    pub fn into_state(self) -> ChainState {
        self.state
    }
}

/// Filters the latent trajectory given counts. Without `initial` the chain
/// starts from a prior draw.
pub fn run_filter(
    panel: &CountsPanel,
    exposure: &ExposureSeries,
    params: &[MarginalShotParams],
    law: &dyn ShotLaw,
    config: &FilterConfig,
    initial: Option<&Trajectory>,
) -> Result<FilterOutput> {
    config.validate()?;
    let horizon = panel.horizon();
    let drawn;
    let start = match initial {
        Some(t) => {
            if (t.horizon() - horizon).abs() > 1e-9 {
                return Err(invalid(format!("initial trajectory horizon {} differs from panel {horizon}", t.horizon())));
            }
            t
        }
        None => {
            let mut r = rng::stream(config.seed, streams::PRIOR_DRAW);
            drawn = simulate_trajectory(params, law, horizon, &mut r)?;
            &drawn
        }
    };
    let obs = PoissonCounts::new(panel.clone(), exposure.clone(), params)?;
    let mut sampler = Sampler::new(law, params, Box::new(obs), start, config.seed)?;
    let mut samples = Vec::with_capacity(config.samples);
    sampler.run(config, |_, state, _| {
        samples.push(state.to_trajectory()?);
        Ok(())
    })?;
    let diagnostics = sampler.diagnostics();
    let final_state = sampler.state().to_trajectory()?;
    Ok(FilterOutput { samples, final_state, diagnostics })
}
