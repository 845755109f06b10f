//! The five reversible-jump moves and their selection probabilities.

use std::fmt;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::law::ShotLaw;
use crate::shot::{sample_stationary_initial, MarginalShotParams, Sizes};

use super::state::ChainState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MoveKind {
    /// Redraw the initial intensities.
    S,
    /// Move a shot between its neighbours.
    P,
    /// Redraw the size of a shot.
    H,
    /// Add a shot.
    B,
    /// Remove a shot.
    D,
}

impl MoveKind {
    pub const ALL: [MoveKind; 5] = [MoveKind::S, MoveKind::P, MoveKind::H, MoveKind::B, MoveKind::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            MoveKind::S => "s",
            MoveKind::P => "p",
            MoveKind::H => "h",
            MoveKind::B => "b",
            MoveKind::D => "d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        MoveKind::ALL
            .into_iter()
            .find(|k| k.label() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown move '{s}'")))
    }
}

impl fmt::Display for MoveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// `p(r | n)`: with no shots only `s` and `b` are possible, each at 1/2;
/// otherwise all five moves have probability 1/5.
pub fn move_probability(kind: MoveKind, n: usize) -> f64 {
    if n == 0 {
        match kind {
            MoveKind::S | MoveKind::B => 0.5,
            _ => 0.0,
        }
    } else {
        0.2
    }
}

pub fn select_move(n: usize, rng: &mut dyn RngCore) -> MoveKind {
    if n == 0 {
        if rng.random::<bool>() {
            MoveKind::S
        } else {
            MoveKind::B
        }
    } else {
        MoveKind::ALL[rng.random_range(0..5)]
    }
}

/// State delta carried by a proposal.
#[derive(Debug, Clone, PartialEq)]
pub enum Change {
    SetInitial { old: Sizes, new: Sizes },
    Shift { slot: usize, old_time: f64, new_time: f64, sizes: Sizes },
    Resize { slot: usize, time: f64, old: Sizes, new: Sizes },
    Birth { time: f64, sizes: Sizes },
    Death { slot: usize, time: f64, sizes: Sizes },
}

impl Change {
    /// Signed additive pieces `(time, sizes, sign)`; the initial values act
    /// as a shot at time zero.
    pub fn atoms(&self) -> smallvec::SmallVec<[(f64, &[f64], f64); 2]> {
        use smallvec::smallvec;
        match self {
            Change::SetInitial { old, new } => smallvec![(0.0, old.as_slice(), -1.0), (0.0, new.as_slice(), 1.0)],
            Change::Shift { old_time, new_time, sizes, .. } => {
                smallvec![(*old_time, sizes.as_slice(), -1.0), (*new_time, sizes.as_slice(), 1.0)]
            }
            Change::Resize { time, old, new, .. } => smallvec![(*time, old.as_slice(), -1.0), (*time, new.as_slice(), 1.0)],
            Change::Birth { time, sizes } => smallvec![(*time, sizes.as_slice(), 1.0)],
            Change::Death { time, sizes, .. } => smallvec![(*time, sizes.as_slice(), -1.0)],
        }
    }

    pub fn apply(&self, state: &mut ChainState) -> Result<()> {
        match self {
            Change::SetInitial { new, .. } => state.set_initial(new),
            Change::Shift { slot, new_time, .. } => state.set_time(*slot, *new_time),
            Change::Resize { slot, new, .. } => state.set_sizes(*slot, new.clone()),
            Change::Birth { time, sizes } => {
                state.insert(*time, sizes.clone());
            }
            Change::Death { slot, .. } => {
                state.remove(*slot)?;
            }
        }
        Ok(())
    }
}

/// A proposed transition and the log factors of its acceptance ratio
/// (the likelihood factor is filled in by the observation model).
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub kind: MoveKind,
    pub change: Change,
    pub log_prior_ratio: f64,
    pub log_proposal_ratio: f64,
    pub log_likelihood_ratio: f64,
    pub log_jacobian: f64,
}

impl Proposal {
    fn new(kind: MoveKind, change: Change, log_prior_ratio: f64, log_proposal_ratio: f64) -> Self {
        Self { kind, change, log_prior_ratio, log_proposal_ratio, log_likelihood_ratio: 0.0, log_jacobian: 0.0 }
    }

    pub fn log_acceptance(&self) -> f64 {
        self.log_likelihood_ratio + self.log_prior_ratio + self.log_proposal_ratio + self.log_jacobian
    }
}

/// Fixed model inputs shared by all moves.
#[derive(Debug, Clone, Copy)]
pub struct MoveContext<'a> {
    pub law: &'a dyn ShotLaw,
    pub params: &'a [MarginalShotParams],
    pub horizon: f64,
}

impl MoveContext<'_> {
    fn ln_rate(&self) -> f64 {
        self.law.total_rate().ln()
    }
}

/// A reversible-jump move. `propose` returns `None` when the move is
/// unavailable in the current state.
pub trait Move: Send + Sync {
    fn kind(&self) -> MoveKind;

    fn propose(&self, ctx: &MoveContext<'_>, state: &ChainState, rng: &mut dyn RngCore) -> Result<Option<Proposal>>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct InitialMove;

#[derive(Debug, Default, Clone, Copy)]
pub struct PositionMove;

#[derive(Debug, Default, Clone, Copy)]
pub struct HeightMove;

#[derive(Debug, Default, Clone, Copy)]
pub struct BirthMove;

#[derive(Debug, Default, Clone, Copy)]
pub struct DeathMove;

impl Move for InitialMove {
    fn kind(&self) -> MoveKind {
        MoveKind::S
    }

    fn propose(&self, ctx: &MoveContext<'_>, state: &ChainState, rng: &mut dyn RngCore) -> Result<Option<Proposal>> {
        let new: Sizes = ctx.params.iter().map(|p| sample_stationary_initial(p, rng)).collect::<Result<_>>()?;
        let old: Sizes = state.initial().iter().copied().collect();
        let mut prior = 0.0;
        for ((p, &o), &n) in ctx.params.iter().zip(&old).zip(&new) {
            prior += p.stationary_log_density(n) - p.stationary_log_density(o);
        }
        // The proposal is the prior, so its ratio is the exact negation.
        Ok(Some(Proposal::new(MoveKind::S, Change::SetInitial { old, new }, prior, -prior)))
    }
}

impl Move for PositionMove {
    fn kind(&self) -> MoveKind {
        MoveKind::P
    }

    fn propose(&self, _ctx: &MoveContext<'_>, state: &ChainState, rng: &mut dyn RngCore) -> Result<Option<Proposal>> {
        if state.is_empty() {
            return Ok(None);
        }
        let slot = rng.random_range(0..state.len());
        let (lo, hi) = state.neighbour_times(slot);
        let new_time = if hi > lo { lo + (hi - lo) * rng.random::<f64>() } else { lo };
        let j = state.jump(slot);
        let change = Change::Shift { slot, old_time: j.time, new_time, sizes: j.sizes.clone() };
        Ok(Some(Proposal::new(MoveKind::P, change, 0.0, 0.0)))
    }
}

impl Move for HeightMove {
    fn kind(&self) -> MoveKind {
        MoveKind::H
    }

    fn propose(&self, ctx: &MoveContext<'_>, state: &ChainState, rng: &mut dyn RngCore) -> Result<Option<Proposal>> {
        if state.is_empty() {
            return Ok(None);
        }
        let slot = rng.random_range(0..state.len());
        let j = state.jump(slot);
        let new = ctx.law.sample(rng)?;
        let prior = ctx.law.log_density(&new)? - ctx.law.log_density(&j.sizes)?;
        let change = Change::Resize { slot, time: j.time, old: j.sizes.clone(), new };
        Ok(Some(Proposal::new(MoveKind::H, change, prior, -prior)))
    }
}

/// `ln[p(d | n+1) / p(b | n)] - ln(n+1) + ln T`, the size-free part of the
/// birth proposal ratio.
fn birth_proposal_core(n: usize, horizon: f64) -> f64 {
    (move_probability(MoveKind::D, n + 1) / move_probability(MoveKind::B, n)).ln() - ((n + 1) as f64).ln() + horizon.ln()
}

impl Move for BirthMove {
    fn kind(&self) -> MoveKind {
        MoveKind::B
    }

    fn propose(&self, ctx: &MoveContext<'_>, state: &ChainState, rng: &mut dyn RngCore) -> Result<Option<Proposal>> {
        let n = state.len();
        let time = ctx.horizon * rng.random::<f64>();
        let sizes = ctx.law.sample(rng)?;
        let lf = ctx.law.log_density(&sizes)?;
        let prior = ctx.ln_rate() + lf;
        let proposal = birth_proposal_core(n, ctx.horizon) - lf;
        Ok(Some(Proposal::new(MoveKind::B, Change::Birth { time, sizes }, prior, proposal)))
    }
}

impl Move for DeathMove {
    fn kind(&self) -> MoveKind {
        MoveKind::D
    }

    fn propose(&self, ctx: &MoveContext<'_>, state: &ChainState, rng: &mut dyn RngCore) -> Result<Option<Proposal>> {
        let n = state.len();
        if n == 0 {
            return Ok(None);
        }
        let slot = rng.random_range(0..n);
        let j = state.jump(slot);
        let lf = ctx.law.log_density(&j.sizes)?;
        let prior = -(ctx.ln_rate() + lf);
        let proposal = -(birth_proposal_core(n - 1, ctx.horizon) - lf);
        let change = Change::Death { slot, time: j.time, sizes: j.sizes.clone() };
        Ok(Some(Proposal::new(MoveKind::D, change, prior, proposal)))
    }
}

type MoveCtor = fn() -> Box<dyn Move>;

const MOVES: &[(&str, MoveCtor)] = &[
    ("s", || Box::new(InitialMove)),
    ("p", || Box::new(PositionMove)),
    ("h", || Box::new(HeightMove)),
    ("b", || Box::new(BirthMove)),
    ("d", || Box::new(DeathMove)),
];

pub fn move_by_name(name: &str) -> Result<Box<dyn Move>> {
    MOVES
        .iter()
        .find(|(n, _)| *n == name.trim())
        .map(|(_, ctor)| ctor())
        .ok_or_else(|| Error::Config(format!("unknown move '{name}'")))
}

/// The five moves, indexed by [`MoveKind::index`].
pub fn standard_moves() -> Vec<Box<dyn Move>> {
    MOVES.iter().map(|(_, ctor)| ctor()).collect()
}
