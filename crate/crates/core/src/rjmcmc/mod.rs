//! Reversible-jump MCMC over latent shot-noise trajectories given counts.

mod filter;
mod moves;
mod observation;
mod state;

pub use filter::{run_filter, selection_sweeps, FilterConfig, FilterDiagnostics, FilterOutput, MoveStats, Sampler};
pub use moves::{
    move_by_name, move_probability, select_move, standard_moves, BirthMove, Change, DeathMove, HeightMove, InitialMove,
    Move, MoveContext, MoveKind, PositionMove, Proposal,
};
pub use observation::{Flat, ObservationModel, PoissonCounts, MASS_FLOOR};
pub use state::{ChainState, Jump};
