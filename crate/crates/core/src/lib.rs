//! Lumped-parameter closed-loop circulation with a time-varying elastance
//! left heart, a physics-informed neural surrogate trained on the ODE
//! residual, Sobol sensitivity analysis and differential-evolution
//! estimation of cardiac parameters from a single beat.

pub mod backend;
pub mod error;
pub mod evalkit;
pub mod inverse;
pub mod model;
pub mod sampling;
pub mod seeds;
pub mod sobol;
pub mod solver;
pub mod surrogate;
pub mod trainer;

pub use error::{Error, FormatError, Result};
