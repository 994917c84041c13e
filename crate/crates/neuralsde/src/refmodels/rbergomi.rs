//! Rough-volatility model: the variance is a lognormal functional of a Volterra
//! Gaussian process `Y^a_t = sqrt(2a+1) \int_0^t (t-u)^a dW2_u` with memory
//! exponent `a in (-1/2, 0)`,
//!
//! ```text
//! V_t = xi0 * exp(eta * Y^a_t - (eta^2 / 2) * t^(2a+1))
//! ```
//!
//! and the log spot follows `dY = -V/2 dt + sqrt(V) dW1` with
//! `corr(W1, W2) = rho`. Because `Y^a` is not Markov it cannot be stepped; the
//! joint Gaussian vector of all spot-driver increments and `Y^a` at every grid
//! time is sampled exactly instead, via a Cholesky factorization of its analytic
//! covariance. All kernels used in the covariance are closed-form (the
//! `Y^a`-`Y^a` block through a Gauss hypergeometric series), so the sampler is
//! exact at the grid points.

use crate::error::{Error, Result};
use crate::par;
use crate::pricing::{implied_vol, mc_price_cv, OptionSpec, PriceRow};
use crate::rng::SeedTree;
use crate::sde::{Measure, PathBatch, TimeGrid};
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RBergomiParams {
    /// Kernel exponent in `(-1/2, 0)`; roughness increases toward `-1/2`.
    pub a: f64,
    /// Vol of vol.
    pub eta: f64,
    /// Flat forward variance, the mean of `V_t` at every horizon.
    pub xi0: f64,
    /// Correlation between the spot and variance drivers.
    pub rho: f64,
    pub s0: f64,
}

impl RBergomiParams {
    /// The study parameter set.
    pub fn study() -> Self {
        RBergomiParams {
            a: -0.43,
            eta: 1.9,
            xi0: 0.235 * 0.235,
            rho: -0.5,
            s0: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > -0.5 && self.a < 0.0) {
            return Err(Error::Config(format!(
                "kernel exponent must lie strictly inside (-1/2, 0), got {}",
                self.a
            )));
        }
        if self.eta <= 0.0 {
            return Err(Error::NonPositive {
                what: "vol of vol".to_string(),
                value: self.eta,
            });
        }
        if self.xi0 <= 0.0 {
            return Err(Error::NonPositive {
                what: "forward variance".to_string(),
                value: self.xi0,
            });
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::DegenerateCorrelation { rho: self.rho });
        }
        if self.s0 <= 0.0 {
            return Err(Error::NonPositive {
                what: "spot".to_string(),
                value: self.s0,
            });
        }
        Ok(())
    }
}

/// Gauss hypergeometric `2F1(p, 1; c; z)` by its power series; converges for
/// `|z| < 1` and at `z = 1` when `c - p - 1 > 0`, which the covariance kernel
/// satisfies for every admissible exponent.
fn hyp2f1_1(p: f64, c: f64, z: f64) -> Result<f64> {
    let mut term = 1.0;
    let mut sum = 1.0;
    let max_iter = 500_000;
    let mut small = 0;
    for n in 0..max_iter {
        term *= (p + n as f64) / (c + n as f64) * z;
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() {
            small += 1;
            if small >= 2 {
                return Ok(sum);
            }
        } else {
            small = 0;
        }
    }
    Err(Error::NoConvergence {
        what: "hypergeometric series".to_string(),
        iterations: max_iter,
    })
}

/// `Cov(Y^a_s, Y^a_t)`; on the diagonal this is `t^(2a+1)` exactly.
fn cov_yy(s: f64, t: f64, a: f64) -> Result<f64> {
    if s == 0.0 || t == 0.0 {
        return Ok(0.0);
    }
    let (lo, hi) = if s <= t { (s, t) } else { (t, s) };
    if lo == hi {
        return Ok(hi.powf(2.0 * a + 1.0));
    }
    let f = hyp2f1_1(-a, a + 2.0, lo / hi)?;
    Ok((2.0 * a + 1.0) * lo.powf(a + 1.0) * hi.powf(a) / (a + 1.0) * f)
}

/// `Cov(W1_{t_{k+1}} - W1_{t_k}, Y^a_t)` per unit correlation: the kernel
/// integral `sqrt(2a+1) \int_{t_k}^{min(t_{k+1}, t)} (t-u)^a du` in closed form;
/// zero when the increment lies entirely after `t`.
fn cross_cov(t_k: f64, t_k1: f64, t: f64, a: f64) -> f64 {
    if t <= t_k {
        return 0.0;
    }
    let up = t_k1.min(t);
    (2.0 * a + 1.0).sqrt() * ((t - t_k).powf(a + 1.0) - (t - up).powf(a + 1.0)) / (a + 1.0)
}

/// Joint covariance of `(dW1_0..dW1_{N-1}, Y^a_{t_1}..Y^a_{t_N})`, row-major.
fn joint_covariance(grid: &TimeGrid, a: f64, rho: f64) -> Result<Vec<f64>> {
    let n = grid.n_steps();
    let dim = 2 * n;
    let times = grid.times();
    let mut cov = vec![0.0; dim * dim];
    for k in 0..n {
        cov[k * dim + k] = grid.dt(k);
    }
    for k in 0..n {
        for i in 0..n {
            let c = rho * cross_cov(times[k], times[k + 1], times[i + 1], a);
            cov[k * dim + (n + i)] = c;
            cov[(n + i) * dim + k] = c;
        }
    }
    for i in 0..n {
        for j in i..n {
            let c = cov_yy(times[i + 1], times[j + 1], a)?;
            cov[(n + i) * dim + (n + j)] = c;
            cov[(n + j) * dim + (n + i)] = c;
        }
    }
    Ok(cov)
}

/// In-place lower Cholesky factor of a symmetric matrix; returns `false` when a
/// pivot fails, leaving the buffer unspecified. The upper triangle is zeroed on
/// success.
pub(crate) fn cholesky_lower(m: &mut [f64], dim: usize) -> bool {
    for j in 0..dim {
        let mut diag = m[j * dim + j];
        for k in 0..j {
            diag -= m[j * dim + k] * m[j * dim + k];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return false;
        }
        let root = diag.sqrt();
        m[j * dim + j] = root;
        for i in (j + 1)..dim {
            let mut x = m[i * dim + j];
            for k in 0..j {
                x -= m[i * dim + k] * m[j * dim + k];
            }
            m[i * dim + j] = x / root;
        }
    }
    for i in 0..dim {
        for j in (i + 1)..dim {
            m[i * dim + j] = 0.0;
        }
    }
    true
}

fn factor_with_jitter(base: &[f64], dim: usize) -> Result<Vec<f64>> {
    for jitter in [0.0, 1e-14, 1e-12, 1e-10] {
        let mut m = base.to_vec();
        for i in 0..dim {
            m[i * dim + i] += jitter;
        }
        if cholesky_lower(&mut m, dim) {
            if jitter > 0.0 {
                log::warn!("covariance factorization needed diagonal jitter {jitter}");
            }
            return Ok(m);
        }
    }
    Err(Error::CholeskyFailed { jitter: 1e-10 })
}

/// Exact simulation at the grid points: each path draws the joint Gaussian
/// vector of spot-driver increments and `Y^a` values through the Cholesky
/// factor, maps `Y^a` to the variance curve, and advances the log spot by
/// Euler with the exact increments. Requires a uniform grid. The returned
/// batch carries the spot-driver increments; there is no independent second
/// increment stream (`du` is empty) because the variance is sampled jointly.
pub fn rbergomi_simulate(
    p: &RBergomiParams,
    grid: &TimeGrid,
    n_paths: usize,
    tree: &SeedTree,
    epoch: u64,
) -> Result<PathBatch> {
    p.validate()?;
    let n = grid.n_steps();
    let dt = grid.dt(0);
    if (1..n).any(|k| (grid.dt(k) - dt).abs() > 1e-12 * dt) {
        return Err(Error::Config(
            "exact rough-volatility sampling requires a uniform grid".to_string(),
        ));
    }
    if n_paths == 0 {
        return Err(Error::Empty {
            what: "path batch".to_string(),
        });
    }
    let dim = 2 * n;
    let cov = joint_covariance(grid, p.a, p.rho)?;
    let l = factor_with_jitter(&cov, dim)?;

    let times = grid.times().to_vec();
    let two_a1 = 2.0 * p.a + 1.0;
    let half_eta2 = 0.5 * p.eta * p.eta;
    let y0 = p.s0.ln();
    let per_path = par::map_collect(n_paths, |i| {
        let mut rng = tree.stream("rbergomi", &[epoch, i as u64]);
        let z: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut x = vec![0.0; dim];
        for r in 0..dim {
            let mut acc = 0.0;
            for (c, zc) in z.iter().enumerate().take(r + 1) {
                acc += l[r * dim + c] * zc;
            }
            x[r] = acc;
        }
        let mut v = Vec::with_capacity(n + 1);
        v.push(p.xi0);
        for step in 1..=n {
            let ya = x[n + step - 1];
            v.push(p.xi0 * (p.eta * ya - half_eta2 * times[step].powf(two_a1)).exp());
        }
        let mut y = Vec::with_capacity(n + 1);
        y.push(y0);
        for step in 0..n {
            let vn = v[step];
            y.push(y[step] - 0.5 * vn * dt + vn.sqrt() * x[step]);
        }
        (y, v, x)
    });

    let mut y = vec![0.0; (n + 1) * n_paths];
    let mut v = vec![0.0; (n + 1) * n_paths];
    let mut dw1 = vec![0.0; n * n_paths];
    for (i, (py, pv, px)) in per_path.iter().enumerate() {
        for step in 0..=n {
            y[step * n_paths + i] = py[step];
            v[step * n_paths + i] = pv[step];
        }
        for step in 0..n {
            dw1[step * n_paths + i] = px[step];
        }
    }
    Ok(PathBatch {
        measure: Measure::RiskNeutral,
        times,
        n_paths,
        y,
        v,
        dw1,
        du: Vec::new(),
    })
}

/// The study surface layout: 101 log-strikes evenly spaced in `[-0.5, 0.5]`
/// and bi-monthly maturities out to one year.
pub fn study_cells() -> (Vec<f64>, Vec<f64>) {
    let log_strikes = (0..101).map(|i| -0.5 + i as f64 / 100.0).collect();
    let maturities = (1..=6).map(|i| i as f64 / 6.0).collect();
    (log_strikes, maturities)
}

/// Implied-volatility surface from one shared path batch: calls at
/// `K = s0 * exp(k)` for every log-strike `k` and maturity, priced by plain
/// Monte Carlo (the model has no rates) and inverted per cell. Cells whose
/// inversion fails — deep wings where the estimate falls outside the
/// arbitrage bounds — are kept in the table with the implied vol left empty.
pub fn rbergomi_target_surface(
    p: &RBergomiParams,
    log_strikes: &[f64],
    maturities: &[f64],
    n_steps: usize,
    n_paths: usize,
    tree: &SeedTree,
) -> Result<Vec<PriceRow>> {
    if log_strikes.is_empty() {
        return Err(Error::Empty {
            what: "log-strike grid".to_string(),
        });
    }
    if maturities.is_empty() {
        return Err(Error::Empty {
            what: "maturity list".to_string(),
        });
    }
    let t_max = maturities.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let grid = TimeGrid::uniform(t_max, n_steps)?;
    let mut cells = Vec::with_capacity(maturities.len() * log_strikes.len());
    for &t in maturities {
        let tidx = grid.index_of(t)?;
        for &k in log_strikes {
            let strike = p.s0 * k.exp();
            let spec = OptionSpec::call(strike, tidx);
            spec.validate(grid.n_steps())?;
            cells.push((t, strike, spec));
        }
    }
    let batch = rbergomi_simulate(p, &grid, n_paths, tree, 0)?;
    Ok(par::map_collect(cells.len(), |c| {
        let (t, strike, spec) = &cells[c];
        let est = mc_price_cv(&batch, spec, None, 0.0, 0.0).expect("cell validated above");
        let implied_vol = match implied_vol(est.mean, p.s0, *strike, *t, 0.0, 0.0) {
            Ok(iv) => Some(iv),
            Err(e) => {
                log::warn!("surface cell T={t} K={strike}: {e}; marked missing");
                None
            }
        };
        PriceRow {
            maturity: *t,
            strike: *strike,
            price: est.mean,
            stderr: est.stderr,
            implied_vol,
        }
    }))
}

/// Recovers the Volterra values from a simulated variance curve; exact inverse
/// of the lognormal map used by [`rbergomi_simulate`].
pub fn volterra_from_variance(p: &RBergomiParams, t: f64, v: &[f64]) -> Vec<f64> {
    let shift = 0.5 * p.eta * p.eta * t.powf(2.0 * p.a + 1.0);
    v.iter()
        .map(|&x| ((x / p.xi0).ln() + shift) / p.eta)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_kernels_match_quadrature_oracle() {
        // reference values computed by 40-digit quadrature of the kernel integrals
        let a = -0.43;
        assert!((cov_yy(0.3, 0.7, a).unwrap() - 0.16686429666255185197).abs() < 1e-10);
        assert!((cov_yy(0.9, 1.0, a).unwrap() - 0.38686308988538055455).abs() < 1e-10);
        assert!((cov_yy(0.0625, 1.0, a).unwrap() - 0.051468499534603450922).abs() < 1e-10);
        assert!((cov_yy(0.5, 0.5, a).unwrap() - 0.90751915531716085646).abs() < 1e-14);
        assert!((cov_yy(1.0, 1.0, a).unwrap() - 1.0).abs() < 1e-14);
        let rho = -0.5;
        assert!(
            (rho * cross_cov(0.25, 0.5, 0.75, a) - -0.072160557607810778191).abs() < 1e-12
        );
        // increment straddling the evaluation time
        assert!(
            (rho * cross_cov(0.25, 0.5, 0.4, a) - -0.11130923146267245524).abs() < 1e-12
        );
        assert!(
            (rho * cross_cov(0.25, 0.5, 0.5, a) - -0.14893095399698696156).abs() < 1e-12
        );
        assert_eq!(cross_cov(0.5, 0.75, 0.5, a), 0.0);
        assert_eq!(cross_cov(0.5, 0.75, 0.25, a), 0.0);
    }

    #[test]
    fn cholesky_rejects_indefinite_matrices() {
        let mut bad = vec![1.0, 2.0, 2.0, 1.0];
        assert!(!cholesky_lower(&mut bad, 2));
        let mut good = vec![4.0, 2.0, 2.0, 5.0];
        assert!(cholesky_lower(&mut good, 2));
        assert_eq!(good, vec![2.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn sampled_moments_match_analytic_values() {
        let p = RBergomiParams::study();
        let grid = TimeGrid::uniform(1.0, 16).unwrap();
        let m = 100_000;
        let batch = rbergomi_simulate(&p, &grid, m, &SeedTree::new(31), 0).unwrap();

        // Var(Y^a_t) = t^(2a+1) at t = 0.5 and t = 1
        for (idx, t, want) in [(8, 0.5, 0.90751915531716085646), (16, 1.0, 1.0)] {
            let ya = volterra_from_variance(&p, t, batch.v_at(idx));
            let mean = ya.iter().sum::<f64>() / m as f64;
            let var = ya.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m as f64 - 1.0);
            let band = 3.0 * want * (2.0 / (m as f64 - 1.0)).sqrt();
            assert!(
                (var - want).abs() < band,
                "t={t}: var {var} want {want} band {band}"
            );
            assert!(mean.abs() < 4.0 * (want / m as f64).sqrt());
        }

        // E[V_t] = xi0 by the lognormal mean identity
        let v_t = batch.v_at(16);
        let mean_v = par::sum(v_t) / m as f64;
        let var_v = v_t.iter().map(|x| (x - mean_v) * (x - mean_v)).sum::<f64>()
            / (m as f64 - 1.0);
        let stderr = (var_v / m as f64).sqrt();
        assert!(
            (mean_v - p.xi0).abs() < 4.0 * stderr,
            "mean V {mean_v} xi0 {} stderr {stderr}",
            p.xi0
        );
    }

    #[test]
    fn zero_correlation_decouples_spot_from_variance() {
        let p = RBergomiParams {
            rho: 0.0,
            eta: 0.5,
            ..RBergomiParams::study()
        };
        let grid = TimeGrid::uniform(1.0, 16).unwrap();
        let m = 8_000;
        let batch = rbergomi_simulate(&p, &grid, m, &SeedTree::new(7), 0).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for step in 0..16 {
            let t0 = batch.times[step];
            let t1 = batch.times[step + 1];
            let ya0 = volterra_from_variance(&p, t0, batch.v_at(step));
            let ya1 = volterra_from_variance(&p, t1, batch.v_at(step + 1));
            let y0 = batch.y_at(step);
            let y1 = batch.y_at(step + 1);
            for i in 0..m {
                xs.push(y1[i] - y0[i]);
                ys.push(ya1[i] - ya0[i]);
            }
        }
        let corr = correlation(&xs, &ys);
        assert!(corr.abs() < 0.02, "corr {corr}");

        // negative correlation couples the raw drivers strongly
        let p2 = RBergomiParams::study();
        let batch2 = rbergomi_simulate(&p2, &grid, m, &SeedTree::new(7), 0).unwrap();
        let mut xs2 = Vec::new();
        let mut ys2 = Vec::new();
        for step in 0..16 {
            let t0 = batch2.times[step];
            let t1 = batch2.times[step + 1];
            let ya0 = volterra_from_variance(&p2, t0, batch2.v_at(step));
            let ya1 = volterra_from_variance(&p2, t1, batch2.v_at(step + 1));
            let dw1 = &batch2.dw1[step * m..(step + 1) * m];
            for i in 0..m {
                xs2.push(dw1[i]);
                ys2.push(ya1[i] - ya0[i]);
            }
        }
        assert!(correlation(&xs2, &ys2) < -0.2);
    }

    fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let mut cxx = 0.0;
        let mut cyy = 0.0;
        let mut cxy = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            cxx += (x - mx) * (x - mx);
            cyy += (y - my) * (y - my);
            cxy += (x - mx) * (y - my);
        }
        cxy / (cxx * cyy).sqrt()
    }

    #[test]
    fn parameter_validation() {
        assert!(RBergomiParams::study().validate().is_ok());
        assert!(RBergomiParams { a: 0.1, ..RBergomiParams::study() }.validate().is_err());
        assert!(RBergomiParams { a: -0.5, ..RBergomiParams::study() }.validate().is_err());
        assert!(RBergomiParams { eta: 0.0, ..RBergomiParams::study() }.validate().is_err());
        assert!(RBergomiParams { xi0: -0.1, ..RBergomiParams::study() }.validate().is_err());
        assert!(RBergomiParams { rho: -1.5, ..RBergomiParams::study() }.validate().is_err());

        let grid = TimeGrid::with_knots(1.0, 12, &[0.30001]).unwrap();
        let err = rbergomi_simulate(&RBergomiParams::study(), &grid, 4, &SeedTree::new(1), 0)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn degenerate_vol_of_vol_gives_a_flat_surface() {
        let p = RBergomiParams {
            eta: 1e-8,
            ..RBergomiParams::study()
        };
        // mildly in-the-money through the out wing: cells where the implied
        // vol is well conditioned against Monte Carlo noise
        let rows = rbergomi_target_surface(
            &p,
            &[-0.1, 0.0, 0.1, 0.3],
            &[0.25, 0.5],
            8,
            150_000,
            &SeedTree::new(11),
        )
        .unwrap();
        assert_eq!(rows.len(), 8);
        for row in &rows {
            let iv = row.implied_vol.expect("every cell invertible");
            assert!(
                (iv - 0.235).abs() < 0.005,
                "T={} K={}: iv {iv}",
                row.maturity,
                row.strike
            );
        }
    }

    #[test]
    fn negative_correlation_skews_the_smile() {
        let rows = rbergomi_target_surface(
            &RBergomiParams::study(),
            &[-0.3, 0.3],
            &[1.0 / 6.0],
            12,
            60_000,
            &SeedTree::new(13),
        )
        .unwrap();
        let left = rows[0].implied_vol.unwrap();
        let right = rows[1].implied_vol.unwrap();
        assert!(left > right + 0.02, "left {left} right {right}");
    }

    #[test]
    fn uninvertible_wing_cells_are_marked_missing() {
        // 50 paths cannot reach a strike eight sigmas out; the price is zero,
        // below the strict lower bound, and the cell must survive as data
        let rows = rbergomi_target_surface(
            &RBergomiParams::study(),
            &[0.0, 1.2],
            &[1.0 / 6.0],
            4,
            50,
            &SeedTree::new(5),
        )
        .unwrap();
        assert!(rows[0].implied_vol.is_some());
        assert!(rows[1].implied_vol.is_none());
        assert_eq!(rows[1].price, 0.0);
    }

    #[test]
    fn paths_are_reproducible_and_positive() {
        let p = RBergomiParams::study();
        let grid = TimeGrid::uniform(0.5, 8).unwrap();
        let a = rbergomi_simulate(&p, &grid, 64, &SeedTree::new(3), 2).unwrap();
        let b = rbergomi_simulate(&p, &grid, 64, &SeedTree::new(3), 2).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.v, b.v);
        assert!(a.v.iter().all(|&v| v > 0.0));
        assert!(a.du.is_empty());
        assert_eq!(a.dw1.len(), 8 * 64);
        let c = rbergomi_simulate(&p, &grid, 64, &SeedTree::new(3), 3).unwrap();
        assert_ne!(a.y, c.y);
    }
}
