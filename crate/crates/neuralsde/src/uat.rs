//! Network-size bounds for approximating SDE solutions with one-hidden-layer
//! networks.
//!
//! Given horizon, growth and local-Lipschitz constants, a Barron constant for
//! the target coefficients and a tolerance, [`uat_bounds`] evaluates the
//! closed-form sufficient conditions: the Grönwall exponent `beta`, the
//! admissible radius `r_min`, and the neuron count `p_min` above which a
//! network exists whose SDE tracks the target to within the tolerance. These
//! are worst-case sufficient bounds — for realistic inputs `p_min` is
//! astronomically large — so the module only computes the formulas; it makes
//! no attempt to verify the approximation empirically at that scale.

use crate::error::{Error, Result};

/// Inputs to the approximation bounds.
///
/// `k` bounds the activation function's contribution (the theory leaves the
/// constant unspecified, so it is supplied by the user); `l` is the linear
/// growth constant, `k1r`/`k2r` the local Lipschitz constants on the radius-r
/// ball, `x0_norm` the norm of the initial state and `eps` the target
/// mean-square tolerance, restricted to `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UatInputs {
    pub t: f64,
    pub c: f64,
    pub l: f64,
    pub k1r: f64,
    pub k2r: f64,
    pub x0_norm: f64,
    pub eps: f64,
    pub k: f64,
}

impl UatInputs {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("horizon", self.t),
            ("Barron constant", self.c),
            ("growth constant", self.l),
            ("activation constant", self.k),
        ];
        for (what, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::NonPositive {
                    what: what.to_string(),
                    value,
                });
            }
        }
        let nonnegative = [
            ("Lipschitz constant k1r", self.k1r),
            ("Lipschitz constant k2r", self.k2r),
            ("initial state norm", self.x0_norm),
        ];
        for (what, value) in nonnegative {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(Error::NonPositive {
                    what: what.to_string(),
                    value,
                });
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::NonPositive {
                what: "tolerance".to_string(),
                value: self.eps,
            });
        }
        if self.eps > 1.0 || !self.eps.is_finite() {
            return Err(Error::Config(format!(
                "tolerance {} outside (0, 1]",
                self.eps
            )));
        }
        Ok(())
    }
}

/// The computed bounds: the exponent `beta`, the minimal admissible radius,
/// the minimal neuron count (ceiled to an integer value, kept as `f64`
/// because it routinely exceeds `u64`), and the Barron approximation error
/// `8 (r_min c)^2 / p_min` at that size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UatResult {
    pub beta: f64,
    pub r_min: f64,
    pub p_min: f64,
    pub barron_err: f64,
}

/// Evaluates the sufficient network-size bounds:
///
/// ```text
/// beta  = 54 k^2 t (t^2 + (32/3)^2)
/// r_min = sqrt(8 (1 + 27 x0^4) e^{beta t} / eps)
/// p_min = ceil((r_min^2 c^2 (256 t + 64 t^2) / eps) e^{16 k2r t + 4 k1r t^2})
/// ```
pub fn uat_bounds(inp: &UatInputs) -> Result<UatResult> {
    inp.validate()?;
    let third32 = 32.0 / 3.0;
    let beta = 54.0 * (inp.k * inp.k) * inp.t * (inp.t * inp.t + third32 * third32);
    if !beta.is_finite() {
        return Err(Error::BoundOverflow {
            what: "exponent beta".to_string(),
        });
    }
    let x4 = inp.x0_norm.powi(4);
    let r_sq = 8.0 * (1.0 + 27.0 * x4) * (beta * inp.t).exp() / inp.eps;
    let r_min = r_sq.sqrt();
    if !r_min.is_finite() {
        return Err(Error::BoundOverflow {
            what: "minimal radius".to_string(),
        });
    }
    let growth = 256.0 * inp.t + 64.0 * inp.t * inp.t;
    let lipschitz = (16.0 * inp.k2r * inp.t + 4.0 * inp.k1r * inp.t * inp.t).exp();
    let p_real = (r_min * r_min * (inp.c * inp.c) * growth / inp.eps) * lipschitz;
    if !p_real.is_finite() {
        return Err(Error::BoundOverflow {
            what: "minimal neuron count".to_string(),
        });
    }
    let p_min = p_real.ceil().max(1.0);
    Ok(UatResult {
        beta,
        r_min,
        p_min,
        barron_err: barron_bound(r_min, inp.c, p_min),
    })
}

/// One-hidden-layer approximation error bound `8 (r c)^2 / p` for a function
/// with Barron constant `c` on the radius-`r` ball, approximated by `p`
/// neurons. Callers must supply `r, c > 0` and `p >= 1`.
pub fn barron_bound(r: f64, c: f64, p: f64) -> f64 {
    let rc = r * c;
    8.0 * (rc * rc) / p
}

/// Output-weight budget accompanying [`barron_bound`]: a network achieving
/// the bound exists with hidden-to-output coefficients summing (in absolute
/// value) to at most `2 r c`.
pub fn coefficient_budget(r: f64, c: f64) -> f64 {
    2.0 * r * c
}
