//! Multivariate Cox count processes with shot-noise intensities coupled by a
//! Lévy copula: simulation, reversible-jump filtering of the latent
//! intensity, Monte Carlo EM calibration, exposure modelling and prediction.

pub mod diagnostics;
pub mod error;
pub mod exposure;
pub mod law;
pub mod levy;
pub mod likelihood;
pub mod mcem;
pub mod numeric;
pub mod rjmcmc;
pub mod rng;
pub mod shot;
pub mod stats;

pub use error::{Error, Result};
