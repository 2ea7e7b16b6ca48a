//! Object-centric forward modeling for model predictive control of 2D
//! pushing: a quasi-static simulator, random-push datasets, a small autodiff
//! engine, an interaction-network forward model with encoder/decoder, a
//! location-correction model, and a CEM planner with an MPC loop.

pub mod autodiff;
pub mod checks;
pub mod config;
pub mod correction;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod forward;
pub mod io;
pub mod planner;
pub mod repr;
pub mod sim;

pub use error::{Error, Result};
