//! Learned time discretizations for diffusion ODE solvers.
//!
//! The crate covers noise schedules, analytic and learned denoisers, a small
//! reverse-mode autodiff engine, three solver families, grid parameterization,
//! teacher-forced grid training and the evaluation harness around it.

pub mod commands;
pub mod config;
pub mod denoiser;
pub mod diff;
pub mod discretize;
pub mod error;
pub mod eval;
pub mod ld3;
pub mod optim;
pub mod persist;
pub mod rng;
pub mod schedule;
pub mod solvers;

pub use error::{Error, Result};
