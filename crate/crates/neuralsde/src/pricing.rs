//! Monte Carlo option pricing with a learned hedging control variate, and
//! implied-volatility inversion.
//!
//! The estimator prices option `i` as the sample mean over paths of
//!
//! ```text
//! e^{-r T_i} payoff_i - sum_{n < T_i-index} h_i(t_n, S_n; xi) (S~_{n+1} - S~_n)
//! ```
//!
//! where `S~_t = e^{-(r-d) t} S_t` is the discounted spot, so the hedge leg is
//! a martingale increment sum with zero mean for any hedge network: the
//! estimator stays unbiased and only its variance moves. One shared network
//! body produces one hedge ratio per option (final layer width = number of
//! options); its inputs are normalized time and spot, optionally the variance
//! state. The control-variate training loss is the summed sample variance of
//! the hedged values, differentiable in the hedge weights while the model
//! parameters stay frozen.
//!
//! Every estimator exists twice: once recorded on a [`Graph`] tape (for
//! gradients through either the model parameters or the hedge weights) and
//! once as plain evaluation. The two are kept bitwise identical so that a
//! calibration step and its reporting can never disagree.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::diffkit::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nets::{Mlp, MlpHandle};
use crate::par;
use crate::refmodels::bs::bs_call;
use crate::sde::PathBatch;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptionKind {
    EuropeanCall { strike: f64 },
    /// Pays the running maximum of the spot minus the terminal spot.
    FloatingLookbackPut,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptionSpec {
    pub kind: OptionKind,
    /// Index of the option maturity in the simulation grid.
    pub maturity_index: usize,
}

impl OptionSpec {
    pub fn call(strike: f64, maturity_index: usize) -> Self {
        OptionSpec {
            kind: OptionKind::EuropeanCall { strike },
            maturity_index,
        }
    }

    pub fn lookback_put(maturity_index: usize) -> Self {
        OptionSpec {
            kind: OptionKind::FloatingLookbackPut,
            maturity_index,
        }
    }

    pub fn validate(&self, n_steps: usize) -> Result<()> {
        if self.maturity_index == 0 || self.maturity_index > n_steps {
            return Err(Error::Config(format!(
                "option maturity index {} outside the simulated grid (1..={n_steps})",
                self.maturity_index
            )));
        }
        if let OptionKind::EuropeanCall { strike } = self.kind {
            if !(strike > 0.0 && strike.is_finite()) {
                return Err(Error::NonPositive {
                    what: "strike".to_string(),
                    value: strike,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub control_variate: bool,
}

/// One column of a shared hedge network: `net` maps
/// `(t/T_end, S[, V])` to one ratio per option and `output` selects the column
/// that hedges the option being priced.
#[derive(Debug, Clone, Copy)]
pub struct HedgeLeg<'a> {
    pub net: &'a Mlp,
    pub output: usize,
}

impl HedgeLeg<'_> {
    fn validate(&self) -> Result<()> {
        check_hedge_net(self.net)?;
        if self.output >= self.net.output_dim() {
            return Err(Error::Config(format!(
                "hedge output column {} out of range for a {}-output network",
                self.output,
                self.net.output_dim()
            )));
        }
        Ok(())
    }
}

fn check_hedge_net(net: &Mlp) -> Result<()> {
    if net.input_dim() != 2 && net.input_dim() != 3 {
        return Err(Error::Config(format!(
            "hedge network takes (t/T, S) or (t/T, S, V); got {} inputs",
            net.input_dim()
        )));
    }
    Ok(())
}

/// Exact positive part used on both the tape and the plain side, with the
/// same treatment of signed zero.
fn plus(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Growth-discount factor that turns the spot into a martingale: `e^{-(r-d)t}`.
fn mart_disc(r: f64, d: f64, t: f64) -> f64 {
    (-(r - d) * t).exp()
}

/// Undiscounted payoffs per path.
pub fn payoffs(batch: &PathBatch, spec: &OptionSpec) -> Result<Vec<f64>> {
    spec.validate(batch.n_steps())?;
    let tidx = spec.maturity_index;
    match spec.kind {
        OptionKind::EuropeanCall { strike } => Ok(batch
            .spot_at(tidx)
            .iter()
            .map(|&s| plus(s - strike))
            .collect()),
        OptionKind::FloatingLookbackPut => {
            let m = batch.n_paths;
            let mut run = batch.spot_at(0);
            for n in 1..=tidx {
                let s = batch.spot_at(n);
                for i in 0..m {
                    if s[i] > run[i] {
                        run[i] = s[i];
                    }
                }
            }
            let term = batch.spot_at(tidx);
            Ok((0..m).map(|i| run[i] - term[i]).collect())
        }
    }
}

/// Per-path discounted, hedge-adjusted values; the mean of this vector is the
/// price estimate. Mirrors the tape-recorded estimator bitwise.
pub fn cv_values(
    batch: &PathBatch,
    spec: &OptionSpec,
    hedge: Option<HedgeLeg<'_>>,
    r: f64,
    d: f64,
) -> Result<Vec<f64>> {
    let pay = payoffs(batch, spec)?;
    let m = batch.n_paths;
    let tidx = spec.maturity_index;
    let disc = (-r * batch.times[tidx]).exp();
    let mut leg = vec![0.0; m];
    if let Some(h) = hedge {
        h.validate()?;
        let k_in = h.net.input_dim();
        let jdim = h.net.output_dim();
        let t_end = *batch.times.last().unwrap();
        let mut spot_cur = batch.spot_at(0);
        for n in 0..tidx {
            let spot_next = batch.spot_at(n + 1);
            let tnorm = batch.times[n] / t_end;
            let mut x = vec![0.0; m * k_in];
            if k_in == 2 {
                for i in 0..m {
                    x[2 * i] = tnorm;
                    x[2 * i + 1] = spot_cur[i];
                }
            } else {
                let vrow = batch.v_at(n);
                for i in 0..m {
                    x[3 * i] = tnorm;
                    x[3 * i + 1] = spot_cur[i];
                    x[3 * i + 2] = vrow[i];
                }
            }
            let hout = h.net.eval_rows(&x, m)?;
            let d0 = mart_disc(r, d, batch.times[n]);
            let d1 = mart_disc(r, d, batch.times[n + 1]);
            for i in 0..m {
                let incr = spot_next[i] * d1 - spot_cur[i] * d0;
                leg[i] = leg[i] + hout[i * jdim + h.output] * incr;
            }
            spot_cur = spot_next;
        }
    }
    Ok((0..m).map(|i| pay[i] * disc - leg[i]).collect())
}

/// Monte Carlo price with an optional hedging control variate.
pub fn mc_price_cv(
    batch: &PathBatch,
    spec: &OptionSpec,
    hedge: Option<HedgeLeg<'_>>,
    r: f64,
    d: f64,
) -> Result<PriceEstimate> {
    let control_variate = hedge.is_some();
    let vals = cv_values(batch, spec, hedge, r, d)?;
    let m = vals.len();
    let mean = par::sum(&vals) / m as f64;
    let stderr = if m > 1 {
        let ss: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / ((m - 1) as f64 * m as f64)).sqrt()
    } else {
        0.0
    };
    Ok(PriceEstimate {
        mean,
        stderr,
        n_paths: m,
        control_variate,
    })
}

/// Summed sample variance of the hedged values across options; the training
/// objective for the hedge network. When a hedge is supplied its output width
/// must match the number of options (column `i` hedges option `i`).
pub fn cv_loss(
    batch: &PathBatch,
    specs: &[OptionSpec],
    hedge: Option<&Mlp>,
    r: f64,
    d: f64,
) -> Result<f64> {
    if specs.is_empty() {
        return Err(Error::Empty {
            what: "option specs".to_string(),
        });
    }
    let m = batch.n_paths;
    if m < 2 {
        return Err(Error::Config(
            "sample variance needs at least two paths".to_string(),
        ));
    }
    if let Some(net) = hedge {
        if net.output_dim() != specs.len() {
            return Err(Error::Config(format!(
                "hedge network has {} outputs for {} options",
                net.output_dim(),
                specs.len()
            )));
        }
    }
    let inv = 1.0 / (m as f64 - 1.0);
    let mut total = 0.0;
    for (i, spec) in specs.iter().enumerate() {
        let vals = cv_values(batch, spec, hedge.map(|net| HedgeLeg { net, output: i }), r, d)?;
        let mu = par::sum(&vals) / m as f64;
        let neg = -mu;
        let sq: Vec<f64> = vals.iter().map(|v| (v + neg) * (v + neg)).collect();
        total = total + par::sum(&sq) * inv;
    }
    Ok(total)
}

/// Tape-recorded prices: per-path hedged value nodes and their means, one per
/// option. `spots`/`vols` are the per-step state nodes — either a simulation
/// tape (model gradients flow) or constants lifted from a finished batch
/// (only hedge gradients flow). Exotic payoffs are not tape-recordable and are
/// rejected here; price them with [`mc_price_cv`].
#[derive(Debug)]
pub struct GraphPrices {
    pub per_path: Vec<NodeId>,
    pub mean: Vec<NodeId>,
}

pub fn price_graph(
    g: &mut Graph,
    spots: &[NodeId],
    vols: &[NodeId],
    times: &[f64],
    specs: &[OptionSpec],
    hedge: Option<(&Mlp, &MlpHandle)>,
    r: f64,
    d: f64,
) -> Result<GraphPrices> {
    if specs.is_empty() {
        return Err(Error::Empty {
            what: "option specs".to_string(),
        });
    }
    if spots.len() != times.len() {
        return Err(Error::Config(format!(
            "{} spot nodes for {} grid times",
            spots.len(),
            times.len()
        )));
    }
    let n_steps = times.len() - 1;
    for spec in specs {
        spec.validate(n_steps)?;
        if matches!(spec.kind, OptionKind::FloatingLookbackPut) {
            return Err(Error::Config(
                "path-extremum payoffs are priced without a tape; use mc_price_cv".to_string(),
            ));
        }
    }
    let m = g.shape(spots[0])[0];

    let mut legs: Vec<Option<NodeId>> = vec![None; n_steps + 1];
    if let Some((net, handle)) = hedge {
        check_hedge_net(net)?;
        if net.output_dim() != specs.len() {
            return Err(Error::Config(format!(
                "hedge network has {} outputs for {} options",
                net.output_dim(),
                specs.len()
            )));
        }
        if net.input_dim() == 3 && vols.len() != times.len() {
            return Err(Error::Config(format!(
                "{} variance nodes for {} grid times",
                vols.len(),
                times.len()
            )));
        }
        let t_end = *times.last().unwrap();
        let max_tidx = specs.iter().map(|s| s.maturity_index).max().unwrap();
        let mut matures: Vec<bool> = vec![false; n_steps + 1];
        for spec in specs {
            matures[spec.maturity_index] = true;
        }
        let jdim = net.output_dim();
        let mut acc = g.constant(&[m, jdim], vec![0.0; m * jdim])?;
        for n in 0..max_tidx {
            let tcol = g.const_vec(vec![times[n] / t_end; m]);
            let x = if net.input_dim() == 2 {
                g.stack_cols(&[tcol, spots[n]])?
            } else {
                g.stack_cols(&[tcol, spots[n], vols[n]])?
            };
            let h = net.forward(g, handle, x)?;
            let s0d = g.mul_scalar(spots[n], mart_disc(r, d, times[n]));
            let s1d = g.mul_scalar(spots[n + 1], mart_disc(r, d, times[n + 1]));
            let incr = g.sub(s1d, s0d)?;
            let term = g.mul_bcast_col(h, incr)?;
            acc = g.add(acc, term)?;
            if matures[n + 1] {
                legs[n + 1] = Some(acc);
            }
        }
    }

    let mut per_path = Vec::with_capacity(specs.len());
    let mut mean = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let OptionKind::EuropeanCall { strike } = spec.kind else {
            unreachable!("validated above");
        };
        let tidx = spec.maturity_index;
        let shifted = g.add_scalar(spots[tidx], -strike);
        let pay = g.pos(shifted);
        let dpay = g.mul_scalar(pay, (-r * times[tidx]).exp());
        let val = match legs[tidx] {
            Some(leg) => {
                let col = g.gather_col(leg, i)?;
                g.sub(dpay, col)?
            }
            None => dpay,
        };
        per_path.push(val);
        mean.push(g.mean(val));
    }
    Ok(GraphPrices { per_path, mean })
}

/// Summed per-option sample variances of the per-path value nodes; the
/// differentiable twin of [`cv_loss`].
pub fn cv_loss_graph(g: &mut Graph, prices: &GraphPrices) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for &val in &prices.per_path {
        let m = g.value(val).len();
        if m < 2 {
            return Err(Error::Config(
                "sample variance needs at least two paths".to_string(),
            ));
        }
        let inv = 1.0 / (m as f64 - 1.0);
        let mu = g.mean(val);
        let nmu = g.neg(mu);
        let centered = g.shift_by(nmu, val)?;
        let sq = g.square(centered);
        let ssum = g.sum(sq);
        let var = g.mul_scalar(ssum, inv);
        total = Some(match total {
            Some(t) => g.add(t, var)?,
            None => var,
        });
    }
    total.ok_or_else(|| Error::Empty {
        what: "option specs".to_string(),
    })
}

/// Lifts a finished batch into constant per-step spot and variance nodes, the
/// inputs for hedge training where the model stays frozen.
pub fn const_path_nodes(g: &mut Graph, batch: &PathBatch) -> (Vec<NodeId>, Vec<NodeId>) {
    let mut spots = Vec::with_capacity(batch.n_steps() + 1);
    let mut vols = Vec::with_capacity(batch.n_steps() + 1);
    for n in 0..=batch.n_steps() {
        spots.push(g.const_vec(batch.spot_at(n)));
        vols.push(g.const_vec(batch.v_at(n).to_vec()));
    }
    (spots, vols)
}

/// Inverts a call price to its constant volatility by bracketed root finding
/// (regula falsi with the Illinois safeguard) on `sigma in [1e-4, 5]`, to a
/// residual below `1e-10 * s0`.
pub fn implied_vol(price: f64, s0: f64, k: f64, t: f64, r: f64, d: f64) -> Result<f64> {
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
    if t <= 0.0 {
        return Err(Error::NonPositive {
            what: "maturity".to_string(),
            value: t,
        });
    }
    if !price.is_finite() {
        return Err(Error::NotFinite {
            context: "implied volatility price input".to_string(),
        });
    }
    let lower = plus(s0 * (-d * t).exp() - k * (-r * t).exp());
    let upper = s0 * (-d * t).exp();
    if price <= lower {
        return Err(Error::ArbitrageBound {
            price,
            bound: "intrinsic lower",
            limit: lower,
        });
    }
    if price >= upper {
        return Err(Error::ArbitrageBound {
            price,
            bound: "spot upper",
            limit: upper,
        });
    }

    let tol = 1e-10 * s0;
    let f = |sig: f64| bs_call(s0, k, t, sig, r, d).map(|p| p - price);
    let (mut a, mut b) = (1e-4, 5.0);
    let mut fa = f(a)?;
    if fa.abs() < tol {
        return Ok(a);
    }
    let mut fb = f(b)?;
    if fb.abs() < tol {
        return Ok(b);
    }
    if fa > 0.0 || fb < 0.0 {
        return Err(Error::NoConvergence {
            what: format!("implied-volatility bracketing in sigma within [{a}, {b}]"),
            iterations: 2,
        });
    }
    let mut side = 0i8;
    for _ in 0..200 {
        let mut x = b - fb * (b - a) / (fb - fa);
        if !x.is_finite() || x <= a || x >= b {
            x = 0.5 * (a + b);
        }
        let fx = f(x)?;
        if fx.abs() < tol {
            return Ok(x);
        }
        if fx < 0.0 {
            if side < 0 {
                fb *= 0.5;
            }
            a = x;
            fa = fx;
            side = -1;
        } else {
            if side > 0 {
                fa *= 0.5;
            }
            b = x;
            fb = fx;
            side = 1;
        }
    }
    Err(Error::NoConvergence {
        what: "implied-volatility root refinement".to_string(),
        iterations: 200,
    })
}

/// One row of a price/implied-vol table; a missing implied vol (inversion
/// failed for that cell) round-trips as an empty field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceRow {
    pub maturity: f64,
    pub strike: f64,
    pub price: f64,
    pub stderr: f64,
    pub implied_vol: Option<f64>,
}

pub fn write_price_table(path: &Path, rows: &[PriceRow]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "maturity,strike,price,stderr,implied_vol")?;
    for row in rows {
        write!(
            out,
            "{},{},{},{},",
            row.maturity, row.strike, row.price, row.stderr
        )?;
        match row.implied_vol {
            Some(iv) => writeln!(out, "{iv}")?,
            None => writeln!(out)?,
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_price_table(path: &Path) -> Result<Vec<PriceRow>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if idx == 0 {
            if line.trim() != "maturity,strike,price,stderr,implied_vol" {
                return Err(Error::Csv {
                    line: 1,
                    detail: format!("unexpected header {line:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Csv {
                line: idx + 1,
                detail: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let num = |s: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|e| Error::Csv {
                line: idx + 1,
                detail: format!("{e}: {s:?}"),
            })
        };
        let implied_vol = if fields[4].trim().is_empty() {
            None
        } else {
            Some(num(fields[4])?)
        };
        rows.push(PriceRow {
            maturity: num(fields[0])?,
            strike: num(fields[1])?,
            price: num(fields[2])?,
            stderr: num(fields[3])?,
            implied_vol,
        });
    }
    Ok(rows)
}
