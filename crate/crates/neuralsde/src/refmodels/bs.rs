//! Lognormal (constant-volatility) closed form and historical path generator.

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::sde::TimeGrid;
use rand_distr::{Distribution, StandardNormal};

/// Constant-volatility market: spot `S0`, volatility `sigma`, short rate `r`,
/// dividend yield `d`, and historical drift `mu`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsParams {
    pub s0: f64,
    pub sigma: f64,
    pub r: f64,
    pub d: f64,
    pub mu: f64,
}

impl BsParams {
    pub fn validate(&self) -> Result<()> {
        if self.s0 <= 0.0 {
            return Err(Error::NonPositive {
                what: "spot".to_string(),
                value: self.s0,
            });
        }
        if self.sigma <= 0.0 {
            return Err(Error::NonPositive {
                what: "volatility".to_string(),
                value: self.sigma,
            });
        }
        Ok(())
    }
}

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Standard normal CDF, accurate to about 1e-15 across the real line
/// (rational approximation in the body, Laplace continued fraction in the tail).
pub fn norm_cdf(x: f64) -> f64 {
    let z = x.abs();
    let c = if z > 37.0 {
        0.0
    } else {
        let e = (-z * z / 2.0).exp();
        if z < 7.071_067_811_865_47 {
            let n = ((((((3.526_249_659_989_11e-2 * z + 0.700_383_064_443_688) * z
                + 6.373_962_203_531_65)
                * z
                + 33.912_866_078_383)
                * z
                + 112.079_291_497_871)
                * z
                + 221.213_596_169_931)
                * z
                + 220.206_867_912_376)
                * e;
            let d = ((((((8.838_834_764_831_84e-2 * z + 1.755_667_163_182_64) * z
                + 16.064_177_579_207)
                * z
                + 86.780_732_202_946_1)
                * z
                + 296.564_248_779_674)
                * z
                + 637.333_633_378_831)
                * z
                + 793.826_512_519_948)
                * z
                + 440.413_735_824_752;
            n / d
        } else {
            let b = z + 1.0 / (z + 2.0 / (z + 3.0 / (z + 4.0 / (z + 0.65))));
            e / (SQRT_2PI * b)
        }
    };
    if x > 0.0 {
        1.0 - c
    } else {
        c
    }
}

/// Call price under constant volatility with a continuous dividend yield.
/// A non-positive maturity returns the discounted intrinsic value with a warning
/// rather than an error, so expiring quotes degrade gracefully.
pub fn bs_call(s0: f64, k: f64, t: f64, sigma: f64, r: f64, d: f64) -> Result<f64> {
    if s0 <= 0.0 {
        return Err(Error::NonPositive {
            what: "spot".to_string(),
            value: s0,
        });
    }
    if k <= 0.0 {
        return Err(Error::NonPositive {
            what: "strike".to_string(),
            value: k,
        });
    }
    if sigma <= 0.0 {
        return Err(Error::NonPositive {
            what: "volatility".to_string(),
            value: sigma,
        });
    }
    if t <= 0.0 {
        log::warn!("bs_call: maturity {t} <= 0, returning intrinsic value");
        return Ok((s0 * (-d * t).exp() - k * (-r * t).exp()).max(0.0));
    }
    let sq = sigma * t.sqrt();
    let d1 = ((s0 / k).ln() + (r - d + 0.5 * sigma * sigma) * t) / sq;
    let d2 = d1 - sq;
    Ok(s0 * (-d * t).exp() * norm_cdf(d1) - k * (-r * t).exp() * norm_cdf(d2))
}

/// Historical log-price series `Y_{n+1} = Y_n + (mu - sigma^2/2) dt + sigma dW`,
/// one value per grid time starting at `log S0`. Reproducible via the
/// `"gbm-series"` seed stream.
pub fn gbm_log_series(p: &BsParams, grid: &TimeGrid, tree: &SeedTree) -> Result<Vec<f64>> {
    p.validate()?;
    let mut rng = tree.stream("gbm-series", &[]);
    let mut y = Vec::with_capacity(grid.n_steps() + 1);
    y.push(p.s0.ln());
    let drift = p.mu - 0.5 * p.sigma * p.sigma;
    for n in 0..grid.n_steps() {
        let dt = grid.dt(n);
        let z: f64 = StandardNormal.sample(&mut rng);
        y.push(y[n] + drift * dt + p.sigma * dt.sqrt() * z);
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_cdf_reference_points() {
        // reference values computed at 40-digit precision
        let cases = [
            (0.0, 0.5),
            (0.15, 0.55961769237024251577),
            (1.0, 0.84134474606854294859),
            (1.96, 0.97500210485177956379),
            (-5.0, 2.8665157187919391167e-7),
            (3.3, 0.99951657585761622249),
            (-0.75, 0.22662735237686819933),
            (8.0, 0.9999999999999993779),
        ];
        for (x, want) in cases {
            let got = norm_cdf(x);
            assert!(
                (got - want).abs() < 1e-15,
                "Phi({x}) = {got}, want {want}"
            );
        }
        assert_eq!(norm_cdf(-40.0), 0.0);
        assert_eq!(norm_cdf(40.0), 1.0);
    }

    #[test]
    fn norm_cdf_symmetry() {
        for i in 0..200 {
            let x = -6.0 + 0.06 * i as f64;
            assert!((norm_cdf(x) + norm_cdf(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn call_reference_prices() {
        let atm = bs_call(1.0, 1.0, 1.0, 0.3, 0.0, 0.0).unwrap();
        assert!((atm - 0.11923538474048503592).abs() < 1e-15);
        let itm = bs_call(100.0, 90.0, 0.5, 0.25, 0.05, 0.02).unwrap();
        assert!((itm - 13.653627721859761353).abs() < 1e-12);
        let otm = bs_call(1.0, 1.2, 0.25, 0.4, 0.01, 0.0).unwrap();
        assert!((otm - 0.021944488230722592425).abs() < 1e-15);
    }

    #[test]
    fn call_limits() {
        // vanishing strike: discounted forward
        let fwd = bs_call(1.0, 1e-12, 2.0, 0.3, 0.01, 0.03).unwrap();
        assert!((fwd - (-0.03f64 * 2.0).exp()).abs() < 1e-10);
        // vanishing volatility: intrinsic value
        let intrinsic = bs_call(1.0, 0.8, 1.0, 1e-12, 0.0, 0.0).unwrap();
        assert!((intrinsic - 0.2).abs() < 1e-10);
        // expired: discounted intrinsic, not an error
        let expired = bs_call(1.0, 0.8, 0.0, 0.3, 0.05, 0.0).unwrap();
        assert!((expired - 0.2).abs() < 1e-15);
        assert_eq!(bs_call(1.0, 2.0, -0.1, 0.3, 0.0, 0.0).unwrap(), 0.0);
        assert!(bs_call(-1.0, 1.0, 1.0, 0.3, 0.0, 0.0).is_err());
        assert!(bs_call(1.0, 0.0, 1.0, 0.3, 0.0, 0.0).is_err());
        assert!(bs_call(1.0, 1.0, 1.0, -0.3, 0.0, 0.0).is_err());
    }

    #[test]
    fn call_is_strictly_increasing_in_volatility() {
        // vega at the deep strikes falls below one ulp of the price for
        // volatilities much under 0.15, so the ladder starts there
        for k in [0.5, 1.0, 1.5] {
            let mut last = 0.0;
            for i in 3..=20 {
                let sigma = 0.05 * i as f64;
                let p = bs_call(1.0, k, 0.75, sigma, 0.02, 0.0).unwrap();
                assert!(p > last, "K={k} sigma={sigma}: {p} <= {last}");
                last = p;
            }
        }
    }

    #[test]
    fn gbm_series_statistics_and_reproducibility() {
        use crate::rng::SeedTree;
        let p = BsParams {
            s0: 1.0,
            sigma: 0.3,
            r: 0.025,
            d: 0.0,
            mu: 0.05,
        };
        let grid = TimeGrid::uniform(100.0, 100_000).unwrap();
        let tree = SeedTree::new(17);
        let y = gbm_log_series(&p, &grid, &tree).unwrap();
        assert_eq!(y.len(), 100_001);
        assert_eq!(y[0], 0.0);
        let n = grid.n_steps() as f64;
        let dt = 100.0 / n;
        let mean_inc = (y[y.len() - 1] - y[0]) / n;
        let want = (p.mu - 0.5 * p.sigma * p.sigma) * dt;
        let tol = 4.0 * p.sigma * dt.sqrt() / n.sqrt();
        assert!((mean_inc - want).abs() < tol, "{mean_inc} vs {want}");
        let y2 = gbm_log_series(&p, &grid, &tree).unwrap();
        assert_eq!(y, y2);
    }
}
