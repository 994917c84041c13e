//! Bayesian calibration of the market model.
//!
//! The posterior over network weights combines a Gaussian quote-error
//! likelihood (option mids weighted by bid-ask spreads), an optional
//! transition-density likelihood for an observed return series under the
//! historical measure, and a Gaussian prior. [`Calibrator`] samples that
//! posterior with stochastic-gradient Langevin steps on the model weights,
//! alternating with Adam descent on the hedging control variate that keeps the
//! Monte Carlo price estimates tight. [`staged_calibration`] repeats the
//! procedure maturity segment by maturity segment, freezing each segment once
//! its stage finishes.
//!
//! Every likelihood has a tape-recorded and a plain-arithmetic form built from
//! the same operation order, so the two agree bitwise; the plain forms back
//! the finite-difference gradient checks.

use std::f64::consts::PI;

use rand::Rng;

use crate::diffkit::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nets::{
    adam_step, sgld_step, AdamState, Mlp, OutputActivation, SgldOutcome, SgldState,
};
use crate::par;
use crate::pricing::{const_path_nodes, cv_loss_graph, cv_values, price_graph, HedgeLeg, OptionSpec};
use crate::rng::SeedTree;
use crate::sde::{
    BindSpec, Increments, Measure, ModelHandles, NeuralSdeModel, Rho, SimTape, TimeGrid,
};

/// One quoted call: mid price plus its bid-ask spread in basis points of spot.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionQuote {
    pub strike: f64,
    pub maturity: f64,
    pub maturity_index: usize,
    pub mid: f64,
    pub spread: f64,
}

/// Raw bid/ask input for [`OptionDataset::from_bid_ask`].
#[derive(Debug, Clone, PartialEq)]
pub struct BidAskQuote {
    pub strike: f64,
    pub maturity: f64,
    pub maturity_index: usize,
    pub bid: f64,
    pub ask: f64,
}

/// Market call quotes against one spot, with the spread-derived weights
/// `w_i = delta^2 / delta_i^2` where `delta^2 = 1 / sum(1/delta_i^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionDataset {
    pub s0: f64,
    pub quotes: Vec<OptionQuote>,
    pub delta_sq: f64,
    pub weights: Vec<f64>,
}

/// Pooled spread scale and per-option weights from basis-point spreads.
pub fn spread_weights(spreads: &[f64]) -> Result<(f64, Vec<f64>)> {
    if spreads.is_empty() {
        return Err(Error::Empty {
            what: "option spreads".to_string(),
        });
    }
    let mut inv_sum = 0.0;
    for (index, &d) in spreads.iter().enumerate() {
        if !d.is_finite() || d <= 0.0 {
            return Err(Error::ZeroSpread { index });
        }
        inv_sum += 1.0 / (d * d);
    }
    let delta_sq = 1.0 / inv_sum;
    let weights = spreads.iter().map(|&d| delta_sq / (d * d)).collect();
    Ok((delta_sq, weights))
}

impl OptionDataset {
    pub fn new(s0: f64, quotes: Vec<OptionQuote>) -> Result<Self> {
        if !(s0 > 0.0) || !s0.is_finite() {
            return Err(Error::NonPositive {
                what: "dataset spot".to_string(),
                value: s0,
            });
        }
        for (i, q) in quotes.iter().enumerate() {
            if !(q.strike > 0.0) || !q.strike.is_finite() {
                return Err(Error::NonPositive {
                    what: format!("strike of option {i}"),
                    value: q.strike,
                });
            }
            if !(q.maturity > 0.0) || !q.maturity.is_finite() {
                return Err(Error::NonPositive {
                    what: format!("maturity of option {i}"),
                    value: q.maturity,
                });
            }
            if !(q.mid > 0.0) || !q.mid.is_finite() {
                return Err(Error::NonPositive {
                    what: format!("mid price of option {i}"),
                    value: q.mid,
                });
            }
        }
        let spreads: Vec<f64> = quotes.iter().map(|q| q.spread).collect();
        let (delta_sq, weights) = spread_weights(&spreads)?;
        Ok(OptionDataset {
            s0,
            quotes,
            delta_sq,
            weights,
        })
    }

    /// Builds the dataset from bid/ask pairs: mid `(bid+ask)/2`, spread
    /// `(1e4/s0)*|ask - bid|` basis points.
    pub fn from_bid_ask(s0: f64, rows: &[BidAskQuote]) -> Result<Self> {
        if !(s0 > 0.0) || !s0.is_finite() {
            return Err(Error::NonPositive {
                what: "dataset spot".to_string(),
                value: s0,
            });
        }
        let scale = 1e4 / s0;
        let quotes = rows
            .iter()
            .map(|q| OptionQuote {
                strike: q.strike,
                maturity: q.maturity,
                maturity_index: q.maturity_index,
                mid: 0.5 * (q.bid + q.ask),
                spread: scale * (q.ask - q.bid).abs(),
            })
            .collect();
        Self::new(s0, quotes)
    }

    pub fn len(&self) -> usize {
        self.quotes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quotes.is_empty()
    }

    /// Pricing specs for every quote, in dataset order.
    pub fn specs(&self) -> Vec<OptionSpec> {
        self.quotes
            .iter()
            .map(|q| OptionSpec::call(q.strike, q.maturity_index))
            .collect()
    }
}

/// An observed log-price series, optionally with observed variance; when the
/// variance column is absent the likelihood takes it from a sampled model path.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    pub v: Option<Vec<f64>>,
}

impl TimeSeriesDataset {
    pub fn new(times: Vec<f64>, y: Vec<f64>, v: Option<Vec<f64>>) -> Result<Self> {
        if times.len() != y.len() {
            return Err(Error::ShapeMismatch {
                op: "TimeSeriesDataset::new",
                lhs: vec![times.len()],
                rhs: vec![y.len()],
            });
        }
        if let Some(v) = &v {
            if v.len() != y.len() {
                return Err(Error::ShapeMismatch {
                    op: "TimeSeriesDataset::new",
                    lhs: vec![y.len()],
                    rhs: vec![v.len()],
                });
            }
        }
        if times.len() == 1 {
            return Err(Error::Config(
                "a return series needs at least two observations".to_string(),
            ));
        }
        for w in times.windows(2) {
            let dt = w[1] - w[0];
            if !(dt > 0.0) {
                return Err(Error::NonPositive {
                    what: "time-series step".to_string(),
                    value: dt,
                });
            }
        }
        let finite = times.iter().chain(&y).all(|x| x.is_finite())
            && v.iter().flatten().all(|x| x.is_finite());
        if !finite {
            return Err(Error::NotFinite {
                context: "time-series observations".to_string(),
            });
        }
        Ok(TimeSeriesDataset { times, y, v })
    }

    pub fn empty() -> Self {
        TimeSeriesDataset {
            times: Vec::new(),
            y: Vec::new(),
            v: None,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.times.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.times.len() < 2
    }
}

/// Sampler settings: spread override, prior scale, Langevin step, hedge
/// learning rate, epoch/path counts, burn-in and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// Replaces the dataset-derived spread scale `delta` when set.
    pub delta_override: Option<f64>,
    pub sigma_prior: f64,
    pub eps_step: f64,
    pub adam_lr: f64,
    pub epochs: usize,
    pub n_paths: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            delta_override: None,
            sigma_prior: 1.0,
            eps_step: 1e-6,
            adam_lr: 1e-3,
            epochs: 100,
            n_paths: 512,
            burn_in: 0,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("prior scale", self.sigma_prior),
            ("Langevin step size", self.eps_step),
            ("Adam learning rate", self.adam_lr),
        ];
        for (what, value) in positives {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::NonPositive {
                    what: what.to_string(),
                    value,
                });
            }
        }
        if let Some(d) = self.delta_override {
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NonPositive {
                    what: "spread override".to_string(),
                    value: d,
                });
            }
        }
        if self.n_paths < 2 {
            return Err(Error::Config(
                "calibration needs at least two Monte Carlo paths".to_string(),
            ));
        }
        Ok(())
    }

    /// Effective squared spread scale: the override when set, else the
    /// dataset-derived pooled value.
    pub fn delta_sq_for(&self, ds: &OptionDataset) -> f64 {
        self.delta_override.map_or(ds.delta_sq, |d| d * d)
    }
}

fn ln_2pi() -> f64 {
    (2.0 * PI).ln()
}

/// Weighted squared basis-point pricing error
/// `(1e8/s0^2) * sum_i w_i (price_i - mid_i)^2` — the `G` column of the trace.
pub fn price_misfit(prices: &[f64], ds: &OptionDataset) -> Result<f64> {
    if prices.len() != ds.quotes.len() {
        return Err(Error::ShapeMismatch {
            op: "price_misfit",
            lhs: vec![ds.quotes.len()],
            rhs: vec![prices.len()],
        });
    }
    let scale = 1e8 / (ds.s0 * ds.s0);
    let mut total: Option<f64> = None;
    for (i, q) in ds.quotes.iter().enumerate() {
        let c = scale * ds.weights[i];
        let diff = prices[i] - q.mid;
        let term = (diff * diff) * c;
        total = Some(match total {
            Some(acc) => acc + term,
            None => term,
        });
    }
    total.ok_or(Error::Empty {
        what: "option quotes".to_string(),
    })
}

/// Tape twin of [`price_misfit`] over per-option mean price nodes.
pub fn price_misfit_graph(g: &mut Graph, prices: &[NodeId], ds: &OptionDataset) -> Result<NodeId> {
    if prices.len() != ds.quotes.len() {
        return Err(Error::ShapeMismatch {
            op: "price_misfit",
            lhs: vec![ds.quotes.len()],
            rhs: vec![prices.len()],
        });
    }
    let scale = 1e8 / (ds.s0 * ds.s0);
    let mut total: Option<NodeId> = None;
    for (i, q) in ds.quotes.iter().enumerate() {
        let c = scale * ds.weights[i];
        let diff = g.add_scalar(prices[i], -q.mid);
        let sq = g.square(diff);
        let term = g.mul_scalar(sq, c);
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or(Error::Empty {
        what: "option quotes".to_string(),
    })
}

fn option_lik_terms(n_options: usize, delta_sq: f64) -> (f64, f64) {
    let j = n_options as f64;
    let slope = -0.5 / delta_sq;
    let constant = -0.5 * j * ln_2pi() - 0.5 * j * delta_sq.ln();
    (slope, constant)
}

/// Gaussian quote log-likelihood
/// `-(J/2) log 2*pi - (J/2) log delta^2 - misfit/(2 delta^2)`; `delta_sq > 0`.
pub fn log_lik_options(misfit: f64, n_options: usize, delta_sq: f64) -> f64 {
    let (slope, constant) = option_lik_terms(n_options, delta_sq);
    misfit * slope + constant
}

/// Tape twin of [`log_lik_options`].
pub fn log_lik_options_graph(
    g: &mut Graph,
    misfit: NodeId,
    n_options: usize,
    delta_sq: f64,
) -> NodeId {
    let (slope, constant) = option_lik_terms(n_options, delta_sq);
    let scaled = g.mul_scalar(misfit, slope);
    g.add_scalar(scaled, constant)
}

/// Gaussian log-prior `-sum_i theta_i^2 / (2 sigma_i^2)` (additive constant
/// dropped).
pub fn log_prior(theta: &[f64], sigmas: &[f64]) -> Result<f64> {
    if theta.len() != sigmas.len() {
        return Err(Error::ShapeMismatch {
            op: "log_prior",
            lhs: vec![theta.len()],
            rhs: vec![sigmas.len()],
        });
    }
    let mut total = 0.0;
    for (t, s) in theta.iter().zip(sigmas) {
        let z = t / s;
        total += z * z;
    }
    Ok(-0.5 * total)
}

/// Adds the prior gradient `-theta_i / sigma_i^2` into `grad` in place.
pub fn log_prior_grad(theta: &[f64], sigmas: &[f64], grad: &mut [f64]) -> Result<()> {
    if theta.len() != sigmas.len() || theta.len() != grad.len() {
        return Err(Error::ShapeMismatch {
            op: "log_prior_grad",
            lhs: vec![theta.len()],
            rhs: vec![sigmas.len(), grad.len()],
        });
    }
    for ((g, t), s) in grad.iter_mut().zip(theta).zip(sigmas) {
        *g -= t / (s * s);
    }
    Ok(())
}

fn series_variance_source<'a>(
    series: &'a TimeSeriesDataset,
    sampled: Option<&'a [f64]>,
) -> Result<(&'a [f64], bool)> {
    if series.is_empty() {
        return Err(Error::Empty {
            what: "time-series observations".to_string(),
        });
    }
    if let Some(v) = &series.v {
        return Ok((v, true));
    }
    let v = sampled.ok_or_else(|| {
        Error::Config(
            "a sampled variance path is required when the series has no variance observations"
                .to_string(),
        )
    })?;
    if v.len() != series.times.len() {
        return Err(Error::ShapeMismatch {
            op: "log_lik_timeseries",
            lhs: vec![series.times.len()],
            rhs: vec![v.len()],
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NotFinite {
            context: "sampled variance path".to_string(),
        });
    }
    Ok((v, false))
}

fn biv_step_const(ln2pi: f64, dt: f64) -> f64 {
    -ln2pi - dt.ln()
}

fn uni_step_const(ln2pi: f64, dt: f64) -> f64 {
    ln2pi * -0.5 - dt.ln() * 0.5
}

fn check_log_input(x: f64) -> Result<f64> {
    if x <= 0.0 {
        return Err(Error::NonPositive {
            what: "log input".to_string(),
            value: x,
        });
    }
    Ok(x.ln())
}

/// Transition log-density of the observed series under the historical measure.
///
/// With observed variance each step contributes the bivariate normal
/// log-density of `(dY, dV)` with the model drifts and diffusions evaluated at
/// the observed state; without it the density is the univariate one for `dY`,
/// with the coefficients reading variance off `sampled_variance` (one value
/// per observation time, treated as a constant). Both include the
/// `-log(sigma sigmaV dt)` normalization, so the sum is a proper transition
/// log-density.
pub fn log_lik_timeseries(
    model: &NeuralSdeModel,
    series: &TimeSeriesDataset,
    sampled_variance: Option<&[f64]>,
) -> Result<f64> {
    let (v_vals, bivariate) = series_variance_source(series, sampled_variance)?;
    let ln2pi = ln_2pi();
    let n = series.n_steps();
    let mut total = 0.0;
    if bivariate {
        let rho = model.rho.value();
        let rr = rho * rho;
        let omr = -rr + 1.0;
        if omr <= 0.0 {
            return Err(Error::DegenerateCorrelation { rho });
        }
        let ln_omr = omr.ln();
        let half_ln = ln_omr * -0.5;
        let qk = -0.5 / omr;
        let m2r = rho * -2.0;
        for k in 0..n {
            let t = series.times[k];
            let dt = series.times[k + 1] - t;
            let sqrt_dt = dt.sqrt();
            let dy = series.y[k + 1] - series.y[k];
            let dv = v_vals[k + 1] - v_vals[k];
            let c = model.coeff_rows(t, &[series.y[k]], &[v_vals[k]], Measure::Physical)?;
            let (sigma, sigmav) = (c.sigma[0], c.sigmav[0]);
            let psi = (dy - c.drift_y[0] * dt) / (sigma * sqrt_dt);
            let psiv = (dv - c.drift_v[0] * dt) / (sigmav * sqrt_dt);
            let cross = psi * psiv;
            let quad = (psi * psi + cross * m2r) + psiv * psiv;
            let ls = check_log_input(sigma)?;
            let lsv = check_log_input(sigmav)?;
            let term = (((quad * qk + half_ln) + biv_step_const(ln2pi, dt)) - ls) - lsv;
            total += term;
        }
    } else {
        for k in 0..n {
            let t = series.times[k];
            let dt = series.times[k + 1] - t;
            let sqrt_dt = dt.sqrt();
            let dy = series.y[k + 1] - series.y[k];
            let c = model.coeff_rows(t, &[series.y[k]], &[v_vals[k]], Measure::Physical)?;
            let sigma = c.sigma[0];
            let psi = (dy - c.drift_y[0] * dt) / (sigma * sqrt_dt);
            let ls = check_log_input(sigma)?;
            let term = ((psi * psi) * -0.5 + uni_step_const(ln2pi, dt)) - ls;
            total += term;
        }
    }
    Ok(total)
}

enum RhoTerms {
    Fixed { qk: f64, half_ln: f64, m2r: f64 },
    Node { qk: NodeId, half_ln: NodeId, m2r: NodeId },
}

/// Tape twin of [`log_lik_timeseries`]; gradients flow into the bound model
/// parameters (including a trainable correlation), while observations and any
/// sampled variance path stay constant.
pub fn log_lik_timeseries_graph(
    g: &mut Graph,
    model: &NeuralSdeModel,
    handles: &ModelHandles,
    series: &TimeSeriesDataset,
    sampled_variance: Option<&[f64]>,
) -> Result<NodeId> {
    let (v_vals, bivariate) = series_variance_source(series, sampled_variance)?;
    let ln2pi = ln_2pi();
    let n = series.n_steps();
    let mut total: Option<NodeId> = None;
    if bivariate {
        let terms = match model.rho {
            Rho::Fixed(_) => {
                let rho = model.rho.value();
                let rr = rho * rho;
                let omr = -rr + 1.0;
                if omr <= 0.0 {
                    return Err(Error::DegenerateCorrelation { rho });
                }
                let ln_omr = omr.ln();
                RhoTerms::Fixed {
                    qk: -0.5 / omr,
                    half_ln: ln_omr * -0.5,
                    m2r: rho * -2.0,
                }
            }
            Rho::Trainable(_) => {
                let raw = handles.rho_raw.ok_or_else(|| {
                    Error::Config("trainable correlation is not bound to the tape".to_string())
                })?;
                let rho_t = g.tanh(raw);
                if g.value_scalar(rho_t).abs() >= 1.0 {
                    return Err(Error::DegenerateCorrelation {
                        rho: g.value_scalar(rho_t),
                    });
                }
                let rr = g.square(rho_t);
                let nrr = g.neg(rr);
                let omr = g.add_scalar(nrr, 1.0);
                let ln_omr = g.log(omr)?;
                let half_ln = g.mul_scalar(ln_omr, -0.5);
                let neg_half = g.const_scalar(-0.5);
                let qk = g.div(neg_half, omr)?;
                let m2r = g.mul_scalar(rho_t, -2.0);
                RhoTerms::Node { qk, half_ln, m2r }
            }
        };
        for k in 0..n {
            let t = series.times[k];
            let dt = series.times[k + 1] - t;
            let sqrt_dt = dt.sqrt();
            let dy = series.y[k + 1] - series.y[k];
            let dv = v_vals[k + 1] - v_vals[k];
            let yc = g.const_scalar(series.y[k]);
            let vc = g.const_scalar(v_vals[k]);
            let c = model.coeff_nodes(g, handles, t, yc, vc, Measure::Physical)?;
            let dyc = g.const_scalar(dy);
            let y_drift = g.mul_scalar(c.drift_y, dt);
            let y_num = g.sub(dyc, y_drift)?;
            let y_den = g.mul_scalar(c.sigma, sqrt_dt);
            let psi = g.div(y_num, y_den)?;
            let dvc = g.const_scalar(dv);
            let v_drift = g.mul_scalar(c.drift_v, dt);
            let v_num = g.sub(dvc, v_drift)?;
            let v_den = g.mul_scalar(c.sigmav, sqrt_dt);
            let psiv = g.div(v_num, v_den)?;
            let a = g.square(psi);
            let b = g.square(psiv);
            let cross = g.mul(psi, psiv)?;
            let cr = match &terms {
                RhoTerms::Fixed { m2r, .. } => g.mul_scalar(cross, *m2r),
                RhoTerms::Node { m2r, .. } => g.mul(cross, *m2r)?,
            };
            let s1 = g.add(a, cr)?;
            let quad = g.add(s1, b)?;
            let q1 = match &terms {
                RhoTerms::Fixed { qk, .. } => g.mul_scalar(quad, *qk),
                RhoTerms::Node { qk, .. } => g.mul(quad, *qk)?,
            };
            let q2 = match &terms {
                RhoTerms::Fixed { half_ln, .. } => g.add_scalar(q1, *half_ln),
                RhoTerms::Node { half_ln, .. } => g.add(q1, *half_ln)?,
            };
            let q3 = g.add_scalar(q2, biv_step_const(ln2pi, dt));
            let ls = g.log(c.sigma)?;
            let q4 = g.sub(q3, ls)?;
            let lsv = g.log(c.sigmav)?;
            let term = g.sub(q4, lsv)?;
            total = Some(match total {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
    } else {
        for k in 0..n {
            let t = series.times[k];
            let dt = series.times[k + 1] - t;
            let sqrt_dt = dt.sqrt();
            let dy = series.y[k + 1] - series.y[k];
            let yc = g.const_scalar(series.y[k]);
            let vc = g.const_scalar(v_vals[k]);
            let c = model.coeff_nodes(g, handles, t, yc, vc, Measure::Physical)?;
            let dyc = g.const_scalar(dy);
            let y_drift = g.mul_scalar(c.drift_y, dt);
            let y_num = g.sub(dyc, y_drift)?;
            let y_den = g.mul_scalar(c.sigma, sqrt_dt);
            let psi = g.div(y_num, y_den)?;
            let sq = g.square(psi);
            let q1 = g.mul_scalar(sq, -0.5);
            let q2 = g.add_scalar(q1, uni_step_const(ln2pi, dt));
            let ls = g.log(c.sigma)?;
            let term = g.sub(q2, ls)?;
            total = Some(match total {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
    }
    total.ok_or(Error::Empty {
        what: "time-series observations".to_string(),
    })
}

/// Everything the log posterior reads besides the model parameters. The
/// increments pin the Monte Carlo noise so the posterior is a deterministic
/// function of the parameters, which is what the finite-difference gradient
/// checks and the per-epoch common-random-number scheme rely on.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorData<'a> {
    pub options: Option<&'a OptionDataset>,
    pub series: &'a TimeSeriesDataset,
    /// Variance values at the observation times from a sampled path, used
    /// (and required) only when `series` lacks observed variance.
    pub series_variance: Option<&'a [f64]>,
    pub hedge: Option<&'a Mlp>,
    /// Effective squared spread scale; required when options are present.
    pub delta_sq: Option<f64>,
    pub prior_sigmas: &'a [f64],
    pub grid: &'a TimeGrid,
    pub inc: &'a Increments,
    pub s0: f64,
    pub v0: f64,
}

fn required_delta_sq(delta_sq: Option<f64>) -> Result<f64> {
    match delta_sq {
        Some(v) if v.is_finite() && v > 0.0 => Ok(v),
        Some(v) => Err(Error::NonPositive {
            what: "squared spread scale".to_string(),
            value: v,
        }),
        None => Err(Error::Config(
            "option quotes need a spread scale".to_string(),
        )),
    }
}

/// Tape-recorded log-likelihood (options + series; the prior is added
/// analytically by the caller) plus the per-option prices and misfit read off
/// the tape. `tape` must be a risk-neutral simulation over `data.grid` with
/// `data.inc`, and is required whenever options are present.
pub struct PosteriorParts {
    pub log_lik: NodeId,
    pub prices: Vec<f64>,
    pub misfit: f64,
}

pub fn log_posterior_graph(
    g: &mut Graph,
    model: &NeuralSdeModel,
    handles: &ModelHandles,
    tape: Option<&SimTape>,
    data: &PosteriorData,
) -> Result<PosteriorParts> {
    let mut lik: Option<NodeId> = None;
    let mut prices = Vec::new();
    let mut misfit = 0.0;
    if let Some(ds) = data.options {
        let delta_sq = required_delta_sq(data.delta_sq)?;
        let tape = tape.ok_or_else(|| {
            Error::Config("option pricing needs a simulation tape".to_string())
        })?;
        let specs = ds.specs();
        let bound = data.hedge.map(|h| (h, h.bind(g, false)));
        let hedge = bound.as_ref().map(|(h, handle)| (*h, handle));
        let gp = price_graph(
            g,
            &tape.s,
            &tape.v,
            data.grid.times(),
            &specs,
            hedge,
            model.r,
            model.d,
        )?;
        let gnode = price_misfit_graph(g, &gp.mean, ds)?;
        prices = gp.mean.iter().map(|&id| g.value_scalar(id)).collect();
        misfit = g.value_scalar(gnode);
        lik = Some(log_lik_options_graph(g, gnode, ds.len(), delta_sq));
    }
    if !data.series.is_empty() {
        let ts = log_lik_timeseries_graph(g, model, handles, data.series, data.series_variance)?;
        lik = Some(match lik {
            Some(a) => g.add(a, ts)?,
            None => ts,
        });
    }
    let log_lik = lik.ok_or_else(|| {
        Error::Config("the log posterior needs option quotes or a return series".to_string())
    })?;
    Ok(PosteriorParts {
        log_lik,
        prices,
        misfit,
    })
}

/// Plain-arithmetic log posterior (likelihoods plus prior), bitwise equal to
/// the tape value of [`log_posterior_graph`] plus [`log_prior`]. This is the
/// function the finite-difference gradient checks probe.
pub fn log_posterior(model: &NeuralSdeModel, data: &PosteriorData) -> Result<f64> {
    let mut lik: Option<f64> = None;
    if let Some(ds) = data.options {
        let delta_sq = required_delta_sq(data.delta_sq)?;
        if let Some(net) = data.hedge {
            if net.output_dim() != ds.len() {
                return Err(Error::Config(format!(
                    "hedge network has {} outputs for {} options",
                    net.output_dim(),
                    ds.len()
                )));
            }
        }
        let batch = model.simulate(data.grid, data.inc, Measure::RiskNeutral, data.s0, data.v0)?;
        let specs = ds.specs();
        let m = batch.n_paths;
        let mut prices = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let vals = cv_values(
                &batch,
                spec,
                data.hedge.map(|net| HedgeLeg { net, output: i }),
                model.r,
                model.d,
            )?;
            prices.push(par::sum(&vals) / m as f64);
        }
        let misfit = price_misfit(&prices, ds)?;
        lik = Some(log_lik_options(misfit, ds.len(), delta_sq));
    }
    if !data.series.is_empty() {
        let ts = log_lik_timeseries(model, data.series, data.series_variance)?;
        lik = Some(match lik {
            Some(a) => a + ts,
            None => ts,
        });
    }
    let lik = lik.ok_or_else(|| {
        Error::Config("the log posterior needs option quotes or a return series".to_string())
    })?;
    Ok(lik + log_prior(&model.flat_params(), data.prior_sigmas)?)
}

/// One epoch's trace entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub log_post: f64,
    /// Weighted squared basis-point pricing error (the `G` trace column);
    /// zero when the epoch had no option quotes.
    pub misfit: f64,
    pub prices: Vec<f64>,
    /// Hedge objective before its Adam update, when a hedge was trained.
    pub cv_loss: Option<f64>,
    pub sgld: SgldOutcome,
}

/// Langevin sampler over the model weights with an alternating Adam-trained
/// hedging control variate.
///
/// Each epoch draws fresh Brownian increments, simulates once on the tape to
/// get the posterior gradient, takes one Langevin step on the trainable
/// parameters, re-simulates the updated model on the same increments, and
/// takes one Adam step on the hedge against the variance of the hedged payoffs
/// (common random numbers within the epoch, fresh across epochs).
pub struct Calibrator {
    model: NeuralSdeModel,
    hedge: Option<Mlp>,
    grid: TimeGrid,
    s0: f64,
    v0: f64,
    hyper: HyperParams,
    bind: BindSpec,
    prior_sigmas: Vec<f64>,
    train_idx: Vec<usize>,
    sgld: SgldState,
    adam: Option<AdamState>,
    tree: SeedTree,
    epoch: u64,
}

impl Calibrator {
    pub fn new(
        model: NeuralSdeModel,
        hedge: Option<Mlp>,
        grid: TimeGrid,
        s0: f64,
        v0: f64,
        hyper: HyperParams,
        bind: BindSpec,
    ) -> Result<Self> {
        hyper.validate()?;
        model.validate()?;
        if bind.segment_trainable.len() != model.segments.len() {
            return Err(Error::Config(format!(
                "bind spec covers {} segments, model has {}",
                bind.segment_trainable.len(),
                model.segments.len()
            )));
        }
        if grid.horizon() > model.horizon() + 1e-9 {
            return Err(Error::Config(format!(
                "grid horizon {} exceeds model horizon {}",
                grid.horizon(),
                model.horizon()
            )));
        }
        if s0 <= 0.0 {
            return Err(Error::NonPositive {
                what: "initial spot".to_string(),
                value: s0,
            });
        }
        if !v0.is_finite() {
            return Err(Error::NotFinite {
                context: "initial second factor".to_string(),
            });
        }
        if let Some(h) = &hedge {
            if h.input_dim() != 2 && h.input_dim() != 3 {
                return Err(Error::Config(format!(
                    "hedge network reads (t, S) or (t, S, V), got {} inputs",
                    h.input_dim()
                )));
            }
        }
        let prior_sigmas = model.prior_sigmas(1.0, Some(hyper.sigma_prior));
        let mask = model.trainable_mask(&bind);
        let train_idx = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| t.then_some(i))
            .collect();
        let sgld = SgldState::new(hyper.eps_step);
        let adam = hedge
            .as_ref()
            .map(|h| AdamState::new(h.param_count(), hyper.adam_lr));
        let tree = SeedTree::new(hyper.seed);
        Ok(Calibrator {
            model,
            hedge,
            grid,
            s0,
            v0,
            hyper,
            bind,
            prior_sigmas,
            train_idx,
            sgld,
            adam,
            tree,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &NeuralSdeModel {
        &self.model
    }

    pub fn hedge(&self) -> Option<&Mlp> {
        self.hedge.as_ref()
    }

    pub fn sgld(&self) -> &SgldState {
        &self.sgld
    }

    /// Step-size and noise controls, e.g. to disable injection noise for a
    /// deterministic descent check.
    pub fn sgld_mut(&mut self) -> &mut SgldState {
        &mut self.sgld
    }

    pub fn epoch_index(&self) -> u64 {
        self.epoch
    }

    pub fn into_parts(self) -> (NeuralSdeModel, Option<Mlp>) {
        (self.model, self.hedge)
    }

    /// One epoch against option quotes alone.
    pub fn epoch_options(&mut self, options: &OptionDataset) -> Result<EpochRecord> {
        self.epoch_core(Some(options), &TimeSeriesDataset::empty())
    }

    /// One epoch against option quotes and/or an observed return series; with
    /// an empty series this is bitwise identical to [`Calibrator::epoch_options`].
    pub fn epoch_joint(
        &mut self,
        options: Option<&OptionDataset>,
        series: &TimeSeriesDataset,
    ) -> Result<EpochRecord> {
        self.epoch_core(options, series)
    }

    /// Runs `hyper.epochs` epochs and returns the trace.
    pub fn run(
        &mut self,
        options: Option<&OptionDataset>,
        series: &TimeSeriesDataset,
    ) -> Result<Vec<EpochRecord>> {
        let mut records = Vec::with_capacity(self.hyper.epochs);
        for _ in 0..self.hyper.epochs {
            records.push(self.epoch_core(options, series)?);
        }
        Ok(records)
    }

    fn check_dataset(&self, ds: &OptionDataset) -> Result<()> {
        if (ds.s0 - self.s0).abs() > 1e-12 * self.s0.abs() {
            return Err(Error::Config(format!(
                "dataset spot {} differs from the calibrator spot {}",
                ds.s0, self.s0
            )));
        }
        let times = self.grid.times();
        for (i, q) in ds.quotes.iter().enumerate() {
            if q.maturity_index == 0 || q.maturity_index > self.grid.n_steps() {
                return Err(Error::Config(format!(
                    "option {i} maturity index {} outside the {}-step grid",
                    q.maturity_index,
                    self.grid.n_steps()
                )));
            }
            let t = times[q.maturity_index];
            if (t - q.maturity).abs() > 1e-9 * q.maturity.abs().max(1.0) {
                return Err(Error::Config(format!(
                    "option {i} maturity {} does not match grid time {} at index {}",
                    q.maturity, t, q.maturity_index
                )));
            }
        }
        Ok(())
    }

    fn epoch_core(
        &mut self,
        options: Option<&OptionDataset>,
        series: &TimeSeriesDataset,
    ) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let series_active = !series.is_empty();
        if options.is_none() && !series_active {
            return Err(Error::Config(
                "an epoch needs option quotes or a return series".to_string(),
            ));
        }
        if let Some(ds) = options {
            self.check_dataset(ds)?;
        }
        let delta_sq = options.map(|ds| self.hyper.delta_sq_for(ds));
        let needs_sim = options.is_some() || (series_active && series.v.is_none());

        let inc = Increments::draw(&self.grid, self.hyper.n_paths, &self.tree, epoch);

        let mut g = Graph::new();
        let handles = self.model.bind(&mut g, &self.bind)?;
        let tape = if needs_sim {
            Some(self.model.simulate_graph(
                &mut g,
                &handles,
                &self.grid,
                &inc,
                Measure::RiskNeutral,
                self.s0,
                self.v0,
            )?)
        } else {
            None
        };

        // Latent variance: read the observation times off one sampled path,
        // detached from the tape.
        let sampled_variance: Option<Vec<f64>> = if series_active && series.v.is_none() {
            let tape = tape.as_ref().expect("simulated above");
            let mut idx_rng = self.tree.stream("ts-path-index", &[epoch]);
            let k = idx_rng.gen_range(0..self.hyper.n_paths);
            let mut path = Vec::with_capacity(series.times.len());
            for &t in &series.times {
                let step = self.grid.index_of(t)?;
                path.push(g.value(tape.v[step])[k]);
            }
            Some(path)
        } else {
            None
        };

        let parts = {
            let data = PosteriorData {
                options,
                series,
                series_variance: sampled_variance.as_deref(),
                hedge: self.hedge.as_ref(),
                delta_sq,
                prior_sigmas: &self.prior_sigmas,
                grid: &self.grid,
                inc: &inc,
                s0: self.s0,
                v0: self.v0,
            };
            log_posterior_graph(&mut g, &self.model, &handles, tape.as_ref(), &data)?
        };
        g.backward(parts.log_lik)?;
        let mut grads = self.model.flat_grads(&g, &handles);
        let mut theta = self.model.flat_params();
        let log_post = g.value_scalar(parts.log_lik) + log_prior(&theta, &self.prior_sigmas)?;
        log_prior_grad(&theta, &self.prior_sigmas, &mut grads)?;
        drop(g);

        let mut noise_rng = self.tree.stream("sgld-noise", &[epoch]);
        let mut sub_params: Vec<f64> = self.train_idx.iter().map(|&i| theta[i]).collect();
        let sub_grads: Vec<f64> = self.train_idx.iter().map(|&i| grads[i]).collect();
        let sgld = sgld_step(&mut sub_params, &sub_grads, &mut self.sgld, &mut noise_rng)?;
        for (&value, &i) in sub_params.iter().zip(&self.train_idx) {
            theta[i] = value;
        }
        self.model.set_flat_params(&theta)?;

        // Hedge refresh on the updated model, same increments.
        let mut cv_loss = None;
        if let (Some(ds), true) = (options, self.hedge.is_some()) {
            let specs = ds.specs();
            let batch = self
                .model
                .simulate(&self.grid, &inc, Measure::RiskNeutral, self.s0, self.v0)?;
            let hedge = self.hedge.as_mut().expect("checked above");
            let mut g = Graph::new();
            let (spots, vols) = const_path_nodes(&mut g, &batch);
            let handle = hedge.bind(&mut g, true);
            let gp = price_graph(
                &mut g,
                &spots,
                &vols,
                self.grid.times(),
                &specs,
                Some((&*hedge, &handle)),
                self.model.r,
                self.model.d,
            )?;
            let loss = cv_loss_graph(&mut g, &gp)?;
            g.backward(loss)?;
            cv_loss = Some(g.value_scalar(loss));
            let grads = hedge.flat_grads(&g, &handle);
            if grads.iter().all(|x| x.is_finite()) {
                let mut params = hedge.flat_params();
                adam_step(
                    &mut params,
                    &grads,
                    self.adam.as_mut().expect("state exists alongside the hedge"),
                )?;
                hedge.set_flat_params(&params)?;
            } else {
                log::warn!("epoch {epoch}: hedge gradient not finite, skipping the Adam update");
            }
        }

        self.epoch += 1;
        log::debug!(
            "epoch {epoch}: log_post {log_post:.6e}, misfit {:.6e}",
            parts.misfit
        );
        Ok(EpochRecord {
            epoch,
            log_post,
            misfit: parts.misfit,
            prices: parts.prices,
            cv_loss,
            sgld,
        })
    }
}

/// Maturity-staged calibration: stage `k` trains only segment `k` against that
/// segment's quotes, leaving every other segment's parameters byte-identical.
/// `stage_priors` overrides the prior scale per stage; `hedge_hidden` (when
/// set) gives each stage a fresh `(t, S)` hedge with those hidden widths.
/// Returns the calibrated model and the per-stage traces.
#[allow(clippy::too_many_arguments)]
pub fn staged_calibration(
    model: NeuralSdeModel,
    datasets: &[OptionDataset],
    hedge_hidden: Option<&[usize]>,
    grid: &TimeGrid,
    s0: f64,
    v0: f64,
    hyper: &HyperParams,
    stage_priors: Option<&[f64]>,
) -> Result<(NeuralSdeModel, Vec<Vec<EpochRecord>>)> {
    if datasets.len() != model.segments.len() {
        return Err(Error::Config(format!(
            "{} quote sets for {} maturity segments",
            datasets.len(),
            model.segments.len()
        )));
    }
    if let Some(p) = stage_priors {
        if p.len() != model.segments.len() {
            return Err(Error::Config(format!(
                "{} stage priors for {} maturity segments",
                p.len(),
                model.segments.len()
            )));
        }
    }
    let tree = SeedTree::new(hyper.seed);
    let mut model = model;
    let mut stages = Vec::with_capacity(datasets.len());
    for (k, ds) in datasets.iter().enumerate() {
        let lo = if k == 0 { 0.0 } else { model.seg_ends[k - 1] };
        let hi = model.seg_ends[k];
        for (i, q) in ds.quotes.iter().enumerate() {
            if q.maturity <= lo + 1e-9 || q.maturity > hi + 1e-9 {
                return Err(Error::Config(format!(
                    "stage {k}: option {i} maturity {} outside the segment span ({lo}, {hi}]",
                    q.maturity
                )));
            }
        }
        let hedge = match hedge_hidden {
            Some(hidden) => {
                let mut w = Vec::with_capacity(hidden.len() + 2);
                w.push(2);
                w.extend_from_slice(hidden);
                w.push(ds.len());
                let mut net = Mlp::new(&w, OutputActivation::Identity)?;
                net.init_glorot(1.0, &mut tree.stream("init-hedge", &[k as u64]));
                Some(net)
            }
            None => None,
        };
        let stage_hyper = HyperParams {
            sigma_prior: stage_priors.map_or(hyper.sigma_prior, |p| p[k]),
            ..hyper.clone()
        };
        let bind = BindSpec::stage(&model, k);
        let mut cal = Calibrator::new(model, hedge, grid.clone(), s0, v0, stage_hyper, bind)?;
        let records = cal.run(Some(ds), &TimeSeriesDataset::empty())?;
        let (updated, _) = cal.into_parts();
        model = updated;
        log::info!(
            "stage {k}: final misfit {:.6e}",
            records.last().map_or(f64::NAN, |r| r.misfit)
        );
        stages.push(records);
    }
    Ok((model, stages))
}

/// First epoch count after which the trailing-window mean of the misfit trace
/// settles: the smallest `e` with `|mean(m[e..e+w]) - mean(m[e-w..e])| <=
/// 0.05 * mean(m[e-w..e])`, or `None` if the trace never settles.
pub fn suggest_burn_in(misfit: &[f64], window: usize) -> Option<usize> {
    if window == 0 || misfit.len() < 2 * window {
        return None;
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    for e in window..=misfit.len() - window {
        let prev = mean(&misfit[e - window..e]);
        let cur = mean(&misfit[e..e + window]);
        if (cur - prev).abs() <= 0.05 * prev.abs() {
            return Some(e);
        }
    }
    None
}
