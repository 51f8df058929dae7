//! Radar-based multi-vehicle tracking with a learned measurement model.
//!
//! The crate has two halves. The first learns how a vehicle looks to an
//! automotive radar: detections gathered around annotated vehicles are mapped
//! into a normalized, extent-independent object frame and a variational
//! Bayesian Gaussian mixture is fitted to them ([`vgm`]). Its predictive
//! density, a Student-t mixture over position, Doppler error, and aspect
//! angle, becomes a generative measurement model for an arbitrary vehicle
//! pose and size ([`radar`]).
//!
//! The second half uses that model inside a labeled multi-Bernoulli filter
//! for multiple extended objects ([`filter`]). Measurement partitions and
//! ranked assignments handle the unknown detection-to-vehicle association
//! ([`assoc`]), and a Rao-Blackwellized particle representation carries the
//! nonlinear kinematics together with discrete extent hypotheses
//! ([`particles`]).
//!
//! A scenario simulator with a reflection-point template ([`sim`]), the
//! scan-by-scan tracking pipeline ([`tracker`]), evaluation metrics
//! ([`metrics`]), and JSON file formats ([`io`]) round the crate off into a
//! runnable end-to-end system; the `vartrack` binary exposes them as
//! subcommands.

pub mod assoc;
pub mod config;
pub mod error;
pub mod filter;
pub mod geometry;
pub mod io;
pub mod math;
pub mod metrics;
pub mod particles;
pub mod radar;
pub mod sim;
pub mod tracker;
pub mod vgm;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book;
