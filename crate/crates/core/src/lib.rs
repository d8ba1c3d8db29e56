//! Dual model predictive path-integral control (DMPPI) for interactive
//! highway on-ramp merging.
//!
//! The crate is organized bottom-up:
//!
//! - [`mppi`]: generic sampling-based path-integral solver.
//! - [`traffic`]: ego double integrator and reactive traffic drivers.
//! - [`cost`]: merge-task stage, terminal and penalty costs.
//! - [`belief`]: particle filter over driver parameters, downsampling and
//!   predicted future beliefs.
//! - [`controllers`]: DMPPI, EMPPI and CE-MPPI planners.
//! - [`sim`]: scenario generation, closed-loop trials and Monte Carlo runs.
//! - [`config`] and [`logs`]: run configuration and on-disk artifacts.

pub mod belief;
pub mod config;
pub mod controllers;
pub mod cost;
pub mod logs;
pub mod mppi;
pub mod rng;
pub mod sim;
pub mod traffic;
