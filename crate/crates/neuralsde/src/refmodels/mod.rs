//! Reference market models used to generate ground-truth data: the lognormal
//! closed form and path generator, a square-root stochastic-volatility model
//! with a volatility risk premium, and a rough-volatility model sampled exactly
//! at the grid points.

pub mod bs;
pub mod heston;
pub mod rbergomi;

/// One Monte Carlo ground-truth price cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetPrice {
    pub maturity: f64,
    pub strike: f64,
    pub price: f64,
    pub stderr: f64,
}
