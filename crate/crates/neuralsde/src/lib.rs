//! Bayesian calibration of neural stochastic differential equation market models.
//!
//! The model under the pricing measure is
//!
//! ```text
//! dS_t = (r - d) S_t dt + sigma(t, S_t, V_t) S_t dW1_t
//! dV_t = b(t, V_t) dt + sigmaV(t, V_t) dW2_t,      dW2 = rho dW1 + sqrt(1 - rho^2) dU
//! ```
//!
//! with `sigma`, `b`, `sigmaV` (and optionally a market price of risk `zeta` linking
//! the pricing and historical measures) parameterized by feed-forward networks. The
//! crate provides:
//!
//! * [`diffkit`] — a small define-by-run reverse-mode autodiff over dense `f64` arrays;
//! * [`nets`] — multilayer perceptrons, Glorot initialization, Adam and (stochastic
//!   gradient) Langevin dynamics steps;
//! * [`sde`] — time grids, path batches and the Euler scheme for the neural model in
//!   log-price coordinates, under both measures;
//! * [`refmodels`] — Black-Scholes, Heston and rough Bergomi reference models used to
//!   manufacture calibration targets;
//! * [`pricing`] — Monte Carlo pricing with a learned hedge as control variate, and
//!   implied-volatility inversion;
//! * [`bayes`] — spread-weighted Gaussian likelihoods, priors and the calibration
//!   drivers (options-only, joint options + time series, maturity-staged);
//! * [`posterior`] — chains of epoch records, quantile bands and trace export;
//! * [`uat`] — closed-form network-size bounds for the approximation theorems;
//! * [`experiment`] — configuration, presets, and the generate/calibrate/sweep/price/
//!   surface entry points used by the CLI.
//!
//! Determinism: every source of randomness descends from a single root seed through
//! named sub-streams ([`rng::SeedTree`]), reductions run in a fixed order regardless
//! of the thread count, and repeated runs with the same configuration and seed produce
//! byte-identical artifacts. Path-level work is data-parallel (rayon) behind the
//! `parallel` feature (on by default); disabling it swaps in sequential twins of the
//! same kernels with identical arithmetic order.

pub mod bayes;
pub mod diffkit;
pub mod error;
pub mod experiment;
pub mod nets;
pub mod par;
pub mod posterior;
pub mod pricing;
pub mod refmodels;
pub mod rng;
pub mod sde;
pub mod uat;

pub use error::{Error, Result};
